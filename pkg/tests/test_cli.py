import json
import math
import subprocess
import sys

import numpy as np
import pytest

from stablenet.cli import DEFAULTS, main
from stablenet.network import NetworkSpec, load_model, save_model
from stablenet.tensor import load_tensor, save_tensor
from stablenet.train import init_params

from netutil import random_net


def run(tmp_path, *argv, config=None):
    args = list(argv) + ["--out", str(tmp_path / "out")]
    if config is not None:
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config))
        args += ["--config", str(path)]
    return main(args)


def zero_model(tmp_path):
    spec = NetworkSpec("S", 1, 8, 8, 1, 2, 2)
    path = tmp_path / "zero.stbn"
    save_model(path, spec, init_params(spec, 0, "zeros"))
    return path


class TestCli:
    def test_init(self, tmp_path, capsys):
        assert run(tmp_path, "init", "--seed", "3") == 0
        spec, params = load_model(tmp_path / "out" / "model.stbn")
        assert spec.to_dict() == NetworkSpec(**DEFAULTS["network"]).to_dict()
        ref = init_params(spec, 3)
        for name in ref.names():
            np.testing.assert_array_equal(params[name], ref[name])

    def test_resolved_config(self, tmp_path):
        assert run(tmp_path, "init", config={"network": {"m": 2}}) == 0
        resolved = json.loads((tmp_path / "out" / "config.resolved.json").read_text())
        assert resolved["network"]["m"] == 2
        assert resolved["network"]["channels"] == DEFAULTS["network"]["channels"]
        assert resolved["train"]["batch_size"] == 128
        assert resolved["command"] == "init" and resolved["seed"] == 0

    def test_unknown_key(self, tmp_path, capsys):
        assert run(tmp_path, "init", config={"network": {"depth": 5}}) == 2
        assert "network.depth" in capsys.readouterr().err

    def test_bad_config_file(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        assert main(["init", "--config", str(tmp_path / "bad.json"),
                     "--out", str(tmp_path / "o")]) == 2

    def test_missing_model(self, tmp_path):
        assert run(tmp_path, "certify") == 2
        assert run(tmp_path, "certify", "--model", str(tmp_path / "nope.stbn")) == 2

    def test_threads_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("STBL_THREADS", "1")
        assert run(tmp_path, "init") == 0
        resolved = json.loads((tmp_path / "out" / "config.resolved.json").read_text())
        assert resolved["threads"] == 1
        monkeypatch.setenv("STBL_THREADS", "many")
        assert run(tmp_path, "init") == 2

    def test_certify_zero_model(self, tmp_path, capsys):
        assert run(tmp_path, "certify", "--model", str(zero_model(tmp_path))) == 0
        text = capsys.readouterr().out
        assert "growth_constant_c: 0.0" in text
        # zero pooling filters leave factors (1 + 0) * (1 + 0)
        assert "sensitivity_constant_a: 1.0" in text
        assert (tmp_path / "out" / "certificate.txt").read_text() == text

    def test_forward(self, tmp_path, capsys):
        spec, params = random_net("S", m=1, seed=1, classes=2)
        save_model(tmp_path / "m.stbn", spec, params)
        x = np.random.default_rng(0).standard_normal((3, 8, 8, 1))
        save_tensor(tmp_path / "x.stbl", x)
        assert run(tmp_path, "forward", "--model", str(tmp_path / "m.stbn"),
                   "--input", str(tmp_path / "x.stbl")) == 0
        from stablenet.network import forward
        np.testing.assert_array_equal(load_tensor(tmp_path / "out" / "logits.stbl"),
                                      forward(spec, params, x)[0])
        trace = (tmp_path / "out" / "trace.tsv").read_text().splitlines()
        assert trace[0] == "state\tl2\tlinf"
        assert len(trace) == spec.depth + 2

    def test_verify(self, tmp_path):
        spec, params = random_net("D", m=1, seed=2, classes=2)
        save_model(tmp_path / "m.stbn", spec, params)
        cfg = {"certify": {"method": "dense", "inputs": 5, "pairs": 5}}
        assert run(tmp_path, "verify", "--model", str(tmp_path / "m.stbn"), config=cfg) == 0
        text = (tmp_path / "out" / "verify.txt").read_text()
        assert "check: growth" in text and "violations: 0" in text

    def test_integrate_exponential(self, tmp_path, capsys):
        assert run(tmp_path, "integrate") == 0
        out = capsys.readouterr().out
        final = json.loads(out.splitlines()[0].split(": ", 1)[1])[0]
        assert abs(final - math.e) <= 1e-3
        assert "envelope Growth3_2: pass" in out
        rows = (tmp_path / "out" / "trajectory.tsv").read_text().splitlines()
        assert rows[0] == "t\tx1\tnorm\tbound" and len(rows) == 10_002

    def test_integrate_failure_exit(self, tmp_path, capsys):
        cfg = {"integrate": {"tau": 0.01, "envelopes": ["GrowthD"]}}
        assert run(tmp_path, "integrate", config=cfg) == 1
        assert "FAILED: see" in capsys.readouterr().err
        assert (tmp_path / "out" / "envelope_failures.json").exists()

    def test_integrate_bad_envelope(self, tmp_path):
        assert run(tmp_path, "integrate", config={"integrate": {"envelopes": ["SensitivityS"]}}) == 2

    def test_integrate_schedule(self, tmp_path, capsys):
        cfg = {"integrate": {"A1": {"knots": [0.0, 0.5], "values": [1.0, 0.0]},
                             "tau": 1e-3}}
        assert run(tmp_path, "integrate", config=cfg) == 0
        final = json.loads(capsys.readouterr().out.splitlines()[0].split(": ", 1)[1])[0]
        assert final == pytest.approx(math.exp(0.5), rel=1e-3)

    def test_train_and_perturb(self, tmp_path, capsys):
        cfg = {"network": {"channels": 2},
               "train": {"batch_size": 16, "decay_steps": 20, "total_steps": 20,
                         "eval_interval": 10, "project_spectral": True, "project_boundary": True,
                         "data": {"train_count": 100, "test_count": 50}}}
        assert run(tmp_path, "train", config=cfg) == 0
        out = tmp_path / "out"
        assert "test_accuracy:" in capsys.readouterr().out
        hist = (out / "history.tsv").read_text().splitlines()
        assert len(hist) == 21
        model = str(out / "model.stbn")
        assert run(tmp_path, "perturb", "--model", model, config=cfg) == 0
        table = (out / "robustness.tsv").read_text().splitlines()
        assert len(table) == 3 + len(DEFAULTS["perturb"]["noises"])

    def test_oracle(self, tmp_path, capsys):
        assert run(tmp_path, "oracle", "--instances", "1") == 0
        assert (tmp_path / "out" / "oracle.txt").exists()

    def test_deterministic(self, tmp_path):
        run(tmp_path, "init", "--seed", "5")
        first = (tmp_path / "out" / "model.stbn").read_bytes()
        run(tmp_path, "init", "--seed", "5")
        assert (tmp_path / "out" / "model.stbn").read_bytes() == first

    def test_module_entry(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "stablenet", "init", "--out",
                               str(tmp_path / "o")], capture_output=True, text=True)
        assert proc.returncode == 0 and "model:" in proc.stdout
