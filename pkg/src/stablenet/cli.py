"""Command-line front end.

    stablenet <command> [--config FILE] [--seed N] [--out DIR] [--threads N] ...

Commands: init, forward, certify, verify, integrate, train, perturb, oracle.
Exit status is 0 when every check passed, 1 when a check failed (the report
path is printed) and 2 for bad configuration or usage.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError

DEFAULTS = {
    "network": {
        "variant": "S",
        "m": 1,
        "height": 8,
        "width": 8,
        "in_channels": 1,
        "channels": 4,
        "classes": 2,
        "use_batchnorm": False,
        "padding": "periodic",
        "kernel_size": 3,
    },
    "train": {
        "batch_size": 128,
        "learning_rate": 0.1,
        "decay_steps": 24000,
        "total_steps": 70000,
        "reg_weight": 1e-4,
        "eval_interval": 500,
        "project_nonneg": True,
        "project_spectral": False,
        "project_boundary": False,
        "record_certificates": False,
        "norm_method": "fft",
        "data": {
            "source": "blobs",
            "train_count": 2000,
            "test_count": 500,
            "noise": 0.1,
            "train_images": None,
            "train_labels": None,
            "test_images": None,
            "test_labels": None,
        },
    },
    "integrate": {
        "A1": 1.0,
        "A2": -1.0,
        "b1": 0.0,
        "b2": 0.0,
        "x0": [1.0],
        "T": 1.0,
        "tau": 1e-4,
        "variant": "General",
        "envelopes": ["Growth3_2"],
    },
    "certify": {
        "method": "power",
        "inputs": 10,
        "pairs": 10,
        "input_scale": 1.0,
    },
    "perturb": {
        "noises": [
            {"kind": "unstructured", "level": 0.0},
            {"kind": "unstructured", "level": 0.02},
            {"kind": "unstructured", "level": 0.05},
            {"kind": "structured", "level": 0.25},
            {"kind": "structured", "level": 0.75},
        ],
    },
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path=None):
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return _merge(DEFAULTS, raw)


def _threads(arg):
    if arg is not None:
        return int(arg)
    env = os.environ.get("STBL_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"STBL_THREADS must be an integer, got {env!r}") from None
    return None


def _limit_threads(n):
    if n is None:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # BLAS keeps its own default
        return None
    return threadpool_limits(n)


# ----------------------------------------------------------------- helpers


def _spec(cfg):
    from .network import NetworkSpec

    try:
        return NetworkSpec(**cfg["network"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad network section: {exc}") from exc


def _load_model(path):
    from .network import load_model

    if path is None:
        raise ConfigError("--model is required")
    try:
        return load_model(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load model {path}: {exc}") from exc


def _datasets(cfg, seed):
    from .train import Dataset, load_idx_dataset, make_blobs, normalize

    d = cfg["train"]["data"]
    C = cfg["network"]["classes"]
    size = cfg["network"]["height"]
    if d["source"] == "blobs":
        train = make_blobs(d["train_count"], size, seed=seed * 2 + 1, noise=d["noise"])
        test = make_blobs(d["test_count"], size, seed=seed * 2 + 2, noise=d["noise"],
                          split="test")
    elif d["source"] == "idx":
        try:
            train = load_idx_dataset(d["train_images"], d["train_labels"], C)
            test = load_idx_dataset(d["test_images"], d["test_labels"], C, "test")
        except (OSError, TypeError, ValueError) as exc:
            raise ConfigError(f"cannot read IDX data: {exc}") from exc
    else:
        raise ConfigError("train.data.source must be 'blobs' or 'idx'")
    xi, mean, std = normalize(train.images)
    xt, _, _ = normalize(test.images, mean, std)
    return Dataset(xi, train.labels), Dataset(xt, test.labels, "test"), (mean, std)


def _schedule(value):
    from .inclusion import Schedule

    if isinstance(value, dict):
        return Schedule(value["knots"], value["values"])
    return Schedule.constant(value)


def _fail(report_path):
    print(f"FAILED: see {report_path}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------- commands


def cmd_init(args, cfg, out):
    from .network import save_model
    from .train import init_params

    spec = _spec(cfg)
    P = init_params(spec, args.seed)
    path = out / "model.stbn"
    save_model(path, spec, P)
    print(f"model: {path}")
    return 0


def cmd_forward(args, cfg, out):
    from .network import forward
    from .tensor import load_tensor, save_tensor

    spec, P = _load_model(args.model)
    if args.input is None:
        raise ConfigError("--input is required")
    x = load_tensor(args.input)
    logits, trace = forward(spec, P, x)
    save_tensor(out / "logits.stbl", logits)
    # one column per input for batched runs
    l2 = trace.l2.reshape(len(trace), -1)
    linf = trace.linf.reshape(len(trace), -1)
    lines = ["state\tl2\tlinf"]
    for n in range(len(trace)):
        row = [",".join(repr(float(v)) for v in col[n]) for col in (l2, linf)]
        lines.append(f"{n}\t{row[0]}\t{row[1]}")
    (out / "trace.tsv").write_text("\n".join(lines) + "\n")
    print(np.array2string(np.asarray(logits), precision=6))
    return 0


def cmd_certify(args, cfg, out):
    from .certify import assemble_certificate

    spec, P = _load_model(args.model)
    cert = assemble_certificate(spec, P, cfg["certify"]["method"], args.seed)
    text = cert.to_text()
    (out / "certificate.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_verify(args, cfg, out):
    from .certify import assemble_certificate, verify_growth, verify_sensitivity

    spec, P = _load_model(args.model)
    c = cfg["certify"]
    cert = assemble_certificate(spec, P, c["method"], args.seed)
    rng = np.random.default_rng(args.seed)
    shape = spec.input_shape
    X = c["input_scale"] * rng.standard_normal((c["inputs"],) + shape)
    pairs = [(c["input_scale"] * rng.standard_normal(shape),
              c["input_scale"] * rng.standard_normal(shape)) for _ in range(c["pairs"])]
    g = verify_growth(spec, P, X, cert)
    s = verify_sensitivity(spec, P, pairs, cert)
    path = out / "verify.txt"
    path.write_text(cert.to_text() + "\n" + g.to_text() + "\n" + s.to_text())
    print(g.to_text() + s.to_text(), end="")
    if g.violations or s.violations:
        return _fail(path)
    return 0


def cmd_integrate(args, cfg, out):
    from .inclusion import ENVELOPES, InclusionProblem, bound_envelope, integrate

    c = cfg["integrate"]
    try:
        A1 = _schedule(c["A1"])
        if c["variant"] == "S":
            problem = InclusionProblem.symmetric(A1, _schedule(c["b1"]),
                                                 _schedule(c["b2"]), c["x0"], c["T"])
        else:
            problem = InclusionProblem(A1, _schedule(c["A2"]), _schedule(c["b1"]),
                                       _schedule(c["b2"]), c["x0"], c["T"], c["variant"])
        for env in c["envelopes"]:
            if env not in ENVELOPES or env.startswith("Sensitivity"):
                raise ValueError(f"envelope {env!r} not available from the CLI")
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad integrate section: {exc}") from exc
    traj = integrate(problem, c["tau"])
    reports = [bound_envelope(problem, traj, env) for env in c["envelopes"]]
    if reports:
        traj.envelope = reports[0].bound
    path = out / "trajectory.tsv"
    path.write_text(traj.export())
    print(f"final: {traj.final.tolist()}")
    failed = False
    for r in reports:
        print(f"envelope {r.which}: {'pass' if r.ok else 'FAIL'} "
              f"(min slack {float(r.slack.min())!r})")
        failed |= not r.ok
    if failed:
        rpath = out / "envelope_failures.json"
        rpath.write_text(json.dumps([f for r in reports for f in r.failures()], indent=1))
        return _fail(rpath)
    return 0


def cmd_train(args, cfg, out):
    from .network import save_model
    from .train import TrainConfig, train

    spec = _spec(cfg)
    tcfg = {k: v for k, v in cfg["train"].items() if k != "data"}
    tconf = TrainConfig.from_dict({**tcfg, "seed": args.seed})
    tr, te, (mean, std) = _datasets(cfg, args.seed)
    P, hist = train(spec, tconf, tr, te)
    save_model(out / "model.stbn", spec, P)
    (out / "history.tsv").write_text(hist.to_text())
    (out / "normalization.json").write_text(
        json.dumps({"mean": np.atleast_1d(mean).tolist(),
                    "std": np.atleast_1d(std).tolist()}))
    evals = hist.evaluations()
    if evals and "test_accuracy" in evals[-1]:
        print(f"test_accuracy: {evals[-1]['test_accuracy']!r}")
    print(f"model: {out / 'model.stbn'}")
    return 0


def cmd_perturb(args, cfg, out):
    from .certify import assemble_certificate
    from .robustness import NoiseSpec, evaluate_under_noise

    spec, P = _load_model(args.model)
    _, test, _ = _datasets(cfg, args.seed)
    pattern = test.images[0]
    noises = []
    try:
        for i, n in enumerate(cfg["perturb"]["noises"]):
            if n["kind"] == "structured":
                noises.append(NoiseSpec.structured(n["level"], pattern, args.seed + i))
            else:
                noises.append(NoiseSpec.unstructured(n["level"], args.seed + i))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad perturb section: {exc}") from exc
    cert = assemble_certificate(spec, P, cfg["certify"]["method"], args.seed)
    table = evaluate_under_noise(spec, P, test, noises, cert, strict=False)
    path = out / "robustness.tsv"
    path.write_text(table.to_text())
    print(table.to_text(), end="")
    return 0 if table.ok else _fail(path)


def cmd_oracle(args, cfg, out):
    from .oracle import run_oracle_suite

    report = run_oracle_suite(instances=args.instances, seed=args.seed)
    path = out / "oracle.txt"
    path.write_text(report.to_text())
    print(report.to_text(), end="")
    return 0 if report.ok else _fail(path)


COMMANDS = {
    "init": cmd_init,
    "forward": cmd_forward,
    "certify": cmd_certify,
    "verify": cmd_verify,
    "integrate": cmd_integrate,
    "train": cmd_train,
    "perturb": cmd_perturb,
    "oracle": cmd_oracle,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, help="BLAS thread count")
    parser = argparse.ArgumentParser(prog="stablenet", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("forward", "certify", "verify", "perturb"):
            p.add_argument("--model", help="model file written by init/train")
        if name == "forward":
            p.add_argument("--input", help="STBL tensor (h, w, d) or (B, h, w, d)")
        if name == "oracle":
            p.add_argument("--instances", type=int, default=5,
                           help="random instances per shape")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg = load_config(args.config)
        threads = _threads(args.threads)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        resolved = {**cfg, "seed": args.seed, "threads": threads,
                    "command": args.command}
        (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2))
        limiter = _limit_threads(threads)
        try:
            return COMMANDS[args.command](args, cfg, out)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
