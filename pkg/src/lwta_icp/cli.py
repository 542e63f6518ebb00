"""Command-line entry point: ``lwta-icp <command> [flags]``.

Every command prints ``key=value`` lines on stdout.  Failures print one
``error=<kind> exit=<code> message=...`` line on stderr and exit with the
code of the error class (2 config, 3 data, 4 divergence, 1 otherwise).
"""

import argparse
import os
import sys

import numpy as np

from . import evaluation as E
from . import trainer
from .config import ARCH_PRESETS, TrainConfig
from .data import ingest, normalize, read_dataset
from .errors import ConfigError, LwtaIcpError

THREADS_ENV = "LWTA_ICP_THREADS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _common(p):
    p.add_argument("--config", help="TOML file of TrainConfig keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs", help="parent directory for run directories")
    p.add_argument("--threshold", type=float)
    p.add_argument("--samples", type=int, help="posterior samples averaged at prediction time")
    p.add_argument("--preset", help="dataset preset (blobs, spirals, digits8x8) or data file path")
    p.add_argument("--arch", choices=ARCH_PRESETS)
    p.add_argument("--u", type=int, choices=(2, 4))
    p.add_argument("--winner", choices=("stochastic", "max"),
                   help="'max' picks the argmax winner with no sampling")
    p.add_argument("--epochs", type=int)


def build_parser():
    parser = _Parser(prog="lwta-icp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("train", help="train a model and write a checkpoint"))
    for name, helptext in (("eval", "accuracy and sparsity of a checkpoint"),
                           ("predict", "Bayesian-averaged class probabilities"),
                           ("compress", "prune gates below the threshold"),
                           ("probe", "linear-separability probes")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--checkpoint", required=True)
        if name == "predict":
            p.add_argument("--input", help="CSV or .lwd file of raw (unnormalized) examples")
    p = sub.add_parser("export-maps", help="write conv feature maps as PGM images")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, default=0, help="index among the conv LWTA layers")
    p.add_argument("--index", type=int, default=0, help="test-set image index")
    p.add_argument("--relu-control", action="store_true")
    p = sub.add_parser("sweep", help="train k seeds and report best and mean +- std")
    _common(p)
    p.add_argument("k", type=int)
    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    sub.add_parser("defaults", help="print every config default as TOML")
    return parser


# helpers ---------------------------------------------------------------------------

def _emit(key, value, stream=None):
    if isinstance(value, float):
        value = f"{value:.6g}"
    print(f"{key}={value}", file=stream or sys.stdout)


def resolve_config(args):
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {"seed": args.seed, "threshold": args.threshold, "n_samples": args.samples,
                 "dataset": args.preset, "preset": args.arch, "u": args.u, "winner": args.winner,
                 "epochs": args.epochs}
    changes = {k: v for k, v in overrides.items() if v is not None}
    if "dataset" in changes and "preset" not in changes and not args.config:
        # pick the matching architecture unless the user chose one
        changes["preset"] = "mlp-tiny" if _is_vector_dataset(changes["dataset"]) else "cnn-mini"
    return config.replace(**changes) if changes else config


def _is_vector_dataset(name):
    return name in ("blobs", "spirals") or str(name).endswith(".csv")


def make_run_dir(parent, stem):
    """Create a fresh numbered run directory; never reuses an existing one."""
    os.makedirs(parent, exist_ok=True)
    i = 1
    while True:
        path = os.path.join(parent, f"{stem}-{i:04d}")
        try:
            os.mkdir(path)
            return path
        except FileExistsError:
            i += 1


def _write_lines(path, lines):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))


def _metric_lines(metrics, prefix=""):
    return [f"{prefix}{k}={v:.6g}" if isinstance(v, float) else f"{prefix}{k}={v}" for k, v in metrics.items()]


def _load_checkpoint(args):
    ckpt = trainer.Checkpoint.load(args.checkpoint)
    config = ckpt.config
    changes = {k: v for k, v in {"threshold": args.threshold, "n_samples": args.samples}.items() if v is not None}
    if changes:
        ckpt.config = config.replace(**changes)
    dataset = ingest(args.preset or config.dataset, seed=config.seed, test_fraction=config.test_fraction)
    return ckpt, dataset


def _train_one(config, out, echo=True):
    dataset = ingest(config.dataset, seed=config.seed, test_fraction=config.test_fraction)
    run_dir = make_run_dir(out, f"{config.preset}-{os.path.basename(str(config.dataset))}-s{config.seed}")
    with open(os.path.join(run_dir, "config.toml"), "w", encoding="utf-8") as fh:
        fh.write(config.to_toml())
    metrics_path = os.path.join(run_dir, "metrics.txt")

    def log(metrics):
        _write_lines(metrics_path, [" ".join(_metric_lines(metrics))])

    ckpt = trainer.train(config, dataset, log=log)
    path = os.path.join(run_dir, "checkpoint.lwta")
    ckpt.save(path)
    result = {
        "train_acc": trainer.accuracy(ckpt, dataset.x_train, dataset.t_train, config.n_samples),
        "test_acc": trainer.accuracy(ckpt, dataset.x_test, dataset.t_test, config.n_samples),
    }
    _write_lines(os.path.join(run_dir, "summary.txt"), _metric_lines(result))
    if echo:
        _emit("run_dir", run_dir)
        _emit("checkpoint", path)
        for key, value in result.items():
            _emit(key, value)
    return ckpt, result


# commands --------------------------------------------------------------------------

def cmd_train(args):
    _train_one(resolve_config(args), args.out)


def cmd_eval(args):
    ckpt, ds = _load_checkpoint(args)
    n = ckpt.config.n_samples
    _emit("train_acc", trainer.accuracy(ckpt, ds.x_train, ds.t_train, n))
    _emit("test_acc", trainer.accuracy(ckpt, ds.x_test, ds.t_test, n))
    _emit("test_acc_1sample", trainer.accuracy(ckpt, ds.x_test, ds.t_test, 1))
    _emit("n_samples", n)
    for line in E.sparsity_report(ckpt, ds.x_test).to_lines():
        print(line)


def cmd_predict(args):
    ckpt, ds = _load_checkpoint(args)
    if args.input:
        x, _ = read_dataset(args.input)
        x = normalize(x, ckpt.meta["mean"], ckpt.meta["std"])
    else:
        x = ds.x_test
    probs = trainer.predict(ckpt, x, ckpt.config.n_samples)
    for i, row in enumerate(probs):
        print(f"row={i} class={int(np.argmax(row))} probs={','.join(f'{p:.6f}' for p in row)}")


def cmd_compress(args):
    ckpt, ds = _load_checkpoint(args)
    threshold = ckpt.config.threshold
    pruned, ratio = trainer.compress(ckpt, threshold)
    run_dir = make_run_dir(args.out, "compress")
    path = os.path.join(run_dir, "checkpoint.lwta")
    pruned.save(path)
    n = ckpt.config.n_samples
    _emit("threshold", threshold)
    _emit("compression_ratio", ratio)
    _emit("test_acc_before", trainer.accuracy(ckpt, ds.x_test, ds.t_test, n))
    _emit("test_acc_after", trainer.accuracy(pruned, ds.x_test, ds.t_test, n))
    for key, value in trainer.weight_counts(pruned).items():
        _emit(key, value)
    _emit("checkpoint", path)


def cmd_probe(args):
    ckpt, ds = _load_checkpoint(args)
    for line in E.probe_report(ckpt, ds, ckpt.config.n_samples).to_lines():
        print(line)


def cmd_export_maps(args):
    ckpt, ds = _load_checkpoint(args)
    if ds.kind != "image":
        raise ConfigError("export-maps needs an image dataset")
    if not 0 <= args.index < len(ds.t_test):
        raise ConfigError(f"--index {args.index} outside the test set (size {len(ds.t_test)})")
    run_dir = make_run_dir(args.out, "maps")
    result = E.feature_map_export(ckpt, ds.x_test[args.index], args.layer, run_dir,
                                  relu_control=args.relu_control)
    _emit("out_dir", run_dir)
    _emit("maps", len(result.map_paths))
    _emit("overlap_count", result.overlap_count)
    if result.control_overlap_count is not None:
        _emit("relu_overlap_count", result.control_overlap_count)


def cmd_sweep(args):
    if args.k < 1:
        raise ConfigError("sweep needs k >= 1")
    base = resolve_config(args)
    accs = []
    for i in range(args.k):
        config = base.replace(seed=base.seed + i)
        _, result = _train_one(config, args.out, echo=False)
        accs.append(result["test_acc"])
        _emit(f"seed{config.seed}.test_acc", result["test_acc"])
    accs = np.array(accs)
    _emit("runs", args.k)
    _emit("best", float(accs.max()))
    _emit("best_seed", base.seed + int(np.argmax(accs)))
    _emit("mean", float(accs.mean()))
    _emit("std", float(accs.std()))


def cmd_gradcheck(args):
    from .gradcheck import REL_TOL, run_suite

    errors = run_suite(args.seed)
    for name, err in errors.items():
        _emit(f"case.{name}", err)
    worst = max(errors.values())
    _emit("cases", len(errors))
    _emit("worst_relative_error", worst)
    _emit("status", "pass" if worst <= REL_TOL else "fail")
    return 0 if worst <= REL_TOL else 1


def cmd_defaults(args):
    sys.stdout.write(TrainConfig().to_toml())


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "compress": cmd_compress,
    "probe": cmd_probe, "export-maps": cmd_export_maps, "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck, "defaults": cmd_defaults,
}


def _limit_threads():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be positive")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _fail(kind, code, message):
    message = " ".join(str(message).split())
    print(f"error={kind} exit={code} message={message}", file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        limiter = _limit_threads()
        try:
            code = COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.unregister()
        return code or 0
    except LwtaIcpError as exc:
        return _fail(type(exc).__name__, exc.exit_code, exc)
    except OSError as exc:
        return _fail("IOError", 1, exc)
    except Exception as exc:  # noqa: BLE001 -- keep the error line machine-readable
        return _fail(type(exc).__name__, 1, exc)


if __name__ == "__main__":
    sys.exit(main())
