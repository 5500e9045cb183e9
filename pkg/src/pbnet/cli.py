"""Command-line entry point: ``pbnet {train,eval,solve,gradcheck,generate-data}``.

Exit codes: 0 success, 1 a check failed, 2 usage or validation error, 3 I/O
error. All randomness comes from the configured seed.
"""

import argparse
import hashlib
import math
import os
import sys
import time

import numpy as np

from . import __version__
from . import formats
from . import gradcheck
from . import tensor_core as tc
from .errors import ConfigError, DomainError
from .model import ista_solve, objective
from .training import (TrainConfig, evaluate, generate_dataset, init_params, initial_state,
                       make_datasets, train)

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class _IOFailure(Exception):
    pass


def _write(path, text):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise _IOFailure(f"cannot write {path}: {exc}") from exc


def _read(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise _IOFailure(f"cannot read {path}: {exc}") from exc


def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise _IOFailure(f"cannot create {path}: {exc}") from exc


def _sha256(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _manifest(command, config, seed, artifacts, started):
    return formats.dumps({
        "format": "pbnet-manifest",
        "format_version": 1,
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
        "duration_s": time.perf_counter() - started,
        "version": __version__,
    }) + "\n"


def _emit(args, line):
    if not args.quiet:
        print(line, flush=True)


def _resolve_config(args):
    config = formats.load_config(args.config) if args.config else TrainConfig().validate()
    if args.seed is not None:
        config = formats.config_from_mapping({"seed": args.seed}, base=config)
    return config


def cmd_train(args, started):
    config = _resolve_config(args)
    if args.resume:
        ckpt_config, state = formats.checkpoint_from_text(_read(args.resume))
        frozen = {k: v for k, v in formats.config_to_dict(ckpt_config).items() if k != "epochs"}
        if frozen != {k: v for k, v in formats.config_to_dict(config).items() if k != "epochs"}:
            raise ConfigError("resume: config differs from the checkpoint's (only epochs may change)", "epochs")
    else:
        state = initial_state(config)
    _ensure_dir(args.out)
    params, metrics = train(config, state)
    metrics_text = formats.jsonl(formats.metrics_rows(metrics))
    ckpt_text = formats.checkpoint_to_text(config, state)
    paths = {name: os.path.join(args.out, name)
             for name in ("checkpoint.json", "metrics.jsonl", "manifest.json")}
    _write(paths["checkpoint.json"], ckpt_text)
    _write(paths["metrics.jsonl"], metrics_text)
    _write(paths["manifest.json"], _manifest("train", formats.config_to_dict(config), config.seed,
                                             paths, started))
    if metrics:
        last = metrics[-1]
        _emit(args, formats.dumps({"epochs": config.epochs, "final_train_loss": last["train_loss"],
                                   "alpha": params.alpha, "lambda": params.lam}))
    return EXIT_OK


def cmd_eval(args, started):
    try:
        text = _read(args.checkpoint)
    except _IOFailure as exc:
        raise ConfigError(str(exc), "checkpoint") from exc
    config, state = formats.checkpoint_from_text(text)
    if args.config:
        config = formats.load_config(args.config, base=config)
    if args.seed is not None:
        config = formats.config_from_mapping({"seed": args.seed}, base=config)
    _, test = make_datasets(config)
    rows = []
    for label, params in (("learned", state.params), ("initial", init_params(config))):
        m = evaluate(params, test, config.N)
        rows.append({"params": label, "N": config.N, "n_test": len(test), **m})
    out = formats.jsonl(rows)
    for line in out.splitlines():
        _emit(args, line)
    if args.out:
        _ensure_dir(args.out)
        path = os.path.join(args.out, "eval.jsonl")
        _write(path, out)
        _write(os.path.join(args.out, "manifest.json"),
               _manifest("eval", {"checkpoint": args.checkpoint, "checkpoint_sha256": _sha256(text),
                                  **formats.config_to_dict(config)}, config.seed, {"eval.jsonl": path}, started))
    return EXIT_OK


def _orthonormal_rows(A):
    q, r = np.linalg.qr(A.T)
    # fix column signs so the factorization is unique
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return np.ascontiguousarray(q.T)


def solve_instance(J, K, s, seed, orthonormal=False, noise_sigma=0.0):
    rng = tc.Rng(seed)
    A = tc.scale(1.0 / math.sqrt(J), tc.randn_matrix(rng, J, K))
    if orthonormal:
        A = _orthonormal_rows(A)
    (sample,) = generate_dataset(rng, 1, K, s)
    y = tc.matvec(A, sample.x_gt)
    if noise_sigma > 0:
        y = tc.add(y, tc.scale(noise_sigma, tc.randn_vector(rng, J)))
    return A, sample, y


def cmd_solve(args, started):
    J, K, s = args.J, args.K, args.s
    if args.seed is None:
        args.seed = 0
    if J < 1 or K < 1 or not 1 <= s <= K:
        raise ConfigError(f"need J >= 1, K >= 1 and 1 <= s <= K, got J={J}, K={K}, s={s}", "s")
    if args.orthonormal and J > K:
        raise ConfigError("orthonormal rows need J <= K", "J")
    if not (math.isfinite(args.tol) and args.tol >= 0):
        raise ConfigError(f"tol must be finite and >= 0, got {args.tol}", "tol")
    if args.max_iters < 1:
        raise ConfigError(f"max_iters must be >= 1, got {args.max_iters}", "max_iters")
    if not (math.isfinite(args.lam) and args.lam >= 0):
        raise ConfigError(f"lambda must be finite and >= 0, got {args.lam}", "lambda")
    if not (math.isfinite(args.noise_sigma) and args.noise_sigma >= 0):
        raise ConfigError(f"noise_sigma must be finite and >= 0, got {args.noise_sigma}", "noise_sigma")
    if not 0 <= args.seed < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer", "seed")
    A, sample, y = solve_instance(J, K, s, args.seed, args.orthonormal, args.noise_sigma)
    alpha = args.alpha
    if alpha is None:
        alpha = 0.9 / (2.0 * float(np.linalg.norm(A, 2)) ** 2)
    if not (math.isfinite(alpha) and alpha > 0):
        raise ConfigError(f"alpha must be finite and > 0, got {alpha}", "alpha")
    result = ista_solve(A, y, alpha, args.lam, args.max_iters, args.tol)
    err = tc.sum_squares(tc.sub(result.x, sample.x_gt))
    record = {
        "J": J, "K": K, "s": s, "seed": args.seed, "alpha": alpha, "lambda": args.lam,
        "iterations": result.iterations,
        "objective": result.objective,
        "objective_at_truth": objective(A, sample.x_gt, y, args.lam),
        "nmse": err / tc.sum_squares(sample.x_gt),
    }
    line = formats.dumps(record)
    _emit(args, line)
    if args.out:
        _ensure_dir(args.out)
        path = os.path.join(args.out, "solve.jsonl")
        _write(path, line + "\n")
        settings = {k: v for k, v in vars(args).items() if k not in ("func", "out", "quiet")}
        _write(os.path.join(args.out, "manifest.json"),
               _manifest("solve", settings, args.seed, {"solve.jsonl": path}, started))
    return EXIT_OK


def cmd_gradcheck(args, started):
    for name, limit in gradcheck.MAX_SIZES.items():
        value = getattr(args, name)
        if not 1 <= value <= limit:
            raise ConfigError(f"{name} must be in [1, {limit}], got {value}", name)
    if args.J > args.K:
        raise ConfigError("J must be <= K", "J")
    if args.instances < 1:
        raise ConfigError("instances must be >= 1", "instances")
    seed = 0 if args.seed is None else args.seed
    report = gradcheck.run_suite(seed, args.instances, args.J, args.K, args.N, args.batch)
    rows = []
    for g, v in report.end_to_end.items():
        rows.append({"check": "end_to_end", "group": g, "max_rel_err": v,
                     "tol": gradcheck.END_TO_END_TOL, "pass": v < gradcheck.END_TO_END_TOL})
    for g, v in report.path.items():
        kind = "max_abs_err" if g == "z" else "max_rel_err"
        rows.append({"check": "path_equivalence", "group": g, kind: v,
                     "tol": gradcheck.PATH_TOL, "pass": v < gradcheck.PATH_TOL})
    out = formats.jsonl(rows)
    for line in out.splitlines():
        _emit(args, line)
    if args.out:
        _ensure_dir(args.out)
        path = os.path.join(args.out, "gradcheck.jsonl")
        _write(path, out)
        settings = {"J": args.J, "K": args.K, "N": args.N, "batch": args.batch, "instances": args.instances}
        _write(os.path.join(args.out, "manifest.json"),
               _manifest("gradcheck", settings, seed, {"gradcheck.jsonl": path}, started))
    if not report.passed:
        kind, group, value = max(report.offenders(), key=lambda o: (math.isnan(o[2]), o[2]))
        print(f"gradcheck failed: worst offender {kind}/{group} = {value:.3e} "
              f"(instance seed {report.worst.get((kind, group))})", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_generate_data(args, started):
    config = _resolve_config(args)
    train_set, test_set = make_datasets(config)
    _ensure_dir(args.out)
    header = {"K": config.K, "s": config.s, "seed": config.seed}
    paths = {}
    for name, samples in (("train", train_set), ("test", test_set)):
        path = os.path.join(args.out, f"{name}.jsonl")
        _write(path, formats.dataset_to_text(samples, {"split": name, **header}))
        paths[f"{name}.jsonl"] = path
    _write(os.path.join(args.out, "manifest.json"),
           _manifest("generate-data", formats.config_to_dict(config), config.seed, paths, started))
    _emit(args, formats.dumps({"train": len(train_set), "test": len(test_set), "out": args.out}))
    return EXIT_OK


def _u64(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="pbnet", description="Train and check unrolled ISTA networks for sparse recovery.")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_u64, default=None, help="master seed (overrides config)")
    common.add_argument("--quiet", action="store_true", help="print nothing on success")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="learn (A, alpha, lambda)")
    p.add_argument("--config", help="TOML config file (defaults if omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint against its initial parameters")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="TOML file overriding checkpoint config keys (e.g. N, n_test)")
    p.add_argument("--out", help="directory for eval.jsonl and manifest.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("solve", parents=[common], help="run classic ISTA on one random instance")
    p.add_argument("--J", type=int, default=32)
    p.add_argument("--K", type=int, default=64)
    p.add_argument("--s", type=int, default=4)
    p.add_argument("--alpha", type=float, default=None, help="step size (default 0.9 / (2 sigma_max(A)^2))")
    p.add_argument("--lambda", dest="lam", type=float, default=0.01)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--max-iters", type=int, default=10000)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--orthonormal", action="store_true", help="orthonormalize the rows of A")
    p.add_argument("--out", help="directory for solve.jsonl and manifest.json")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("gradcheck", parents=[common], help="verify training gradients")
    p.add_argument("--J", type=int, default=4)
    p.add_argument("--K", type=int, default=6)
    p.add_argument("--N", type=int, default=3)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--out", help="directory for gradcheck.jsonl and manifest.json")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("generate-data", parents=[common], help="write train/test sparse datasets")
    p.add_argument("--config", help="TOML config file (defaults if omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate_data)
    return parser


def main(argv=None):
    started = time.perf_counter()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, started)
    except (ConfigError, DomainError) as exc:
        field = getattr(exc, "field", None)
        prefix = f"invalid {field}: " if field else "error: "
        print(prefix + str(exc), file=sys.stderr)
        return EXIT_USAGE
    except _IOFailure as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
