"""Command-line front end.

Subcommands: train, eval, stream, sweep-prefix, count-ops, gradcheck,
selftest (plus export-csv for dataset round-trips). A JSON config file can
mirror the model/optimizer structures; flags override file values; unknown
keys or flags abort. Every run directory receives the resolved config, the
pixel permutation (when used), the training history, the best checkpoint,
and a JSON report, which together reproduce the run bitwise.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__, datasets, efficiency, model as model_mod
from . import numerics, streaming, training
from .errors import ConfigError, DataError, LMUFormerError

_TOP_KEYS = {"model", "preset", "optim", "train", "dataset"}
_TRAIN_KEYS = {"epochs", "batch_size", "seed", "permute_seed"}
_PRESET_KEYS = {"name", "spiking", "channels", "order", "theta", "num_blocks",
                "width", "num_pairs", "input_channels", "num_classes"}
_DATASET_KEYS = {"kind", "dir", "data", "labels", "val_data", "val_labels",
                 "limit", "eval_split"}
_OPTIM_KEYS = {"lr", "beta1", "beta2", "eps", "weight_decay", "grad_clip",
               "schedule", "decay_every", "decay_factor"}


def _check_keys(d: dict, allowed: set, where: str) -> dict:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return d


def load_run_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _check_keys(raw, _TOP_KEYS, "config")
    for key, allowed in (("train", _TRAIN_KEYS), ("preset", _PRESET_KEYS),
                         ("dataset", _DATASET_KEYS), ("optim", _OPTIM_KEYS)):
        if key in raw and raw[key] is not None:
            if not isinstance(raw[key], dict):
                raise ConfigError(f"config '{key}' must be an object")
            _check_keys(raw[key], allowed, key)
    return raw


def _resolve(args) -> dict:
    """Merge config file (if any) with flag overrides into one echoable dict."""
    cfg = load_run_config(args.config) if args.config else {}
    cfg.setdefault("train", {})
    cfg.setdefault("optim", {})
    cfg.setdefault("dataset", {})
    cfg.setdefault("preset", {})
    for flag, section, key in (("seed", "train", "seed"),
                               ("epochs", "train", "epochs"),
                               ("batch_size", "train", "batch_size"),
                               ("permute_seed", "train", "permute_seed"),
                               ("lr", "optim", "lr"),
                               ("dataset", "dataset", "kind"),
                               ("data_dir", "dataset", "dir"),
                               ("data", "dataset", "data"),
                               ("labels", "dataset", "labels"),
                               ("limit", "dataset", "limit"),
                               ("eval_split", "dataset", "eval_split")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[section][key] = val
    if getattr(args, "spiking", False):
        cfg["preset"]["spiking"] = True
    cfg["train"].setdefault("seed", 0)
    cfg["train"].setdefault("epochs", 10)
    cfg["train"].setdefault("batch_size", 100)
    cfg["train"].setdefault("permute_seed", 42)
    return cfg


def _build_model(cfg: dict, rng_seed: int):
    if cfg.get("model"):
        mc = model_mod.config_from_dict(cfg["model"])
    else:
        preset = dict(cfg.get("preset") or {})
        name = preset.pop("name", "psmnist")
        if name == "psmnist":
            mc = model_mod.psmnist_config(**preset)
        elif name == "sc":
            mc = model_mod.sc_config(**preset)
        else:
            raise ConfigError(f"unknown preset {name!r} (expected psmnist or sc)")
    return model_mod.build(mc, numerics.RngSpec(rng_seed))


def _load_splits(cfg: dict):
    ds = cfg.get("dataset") or {}
    kind = ds.get("kind")
    permute_seed = cfg["train"]["permute_seed"]
    if kind == "mnist-idx":
        root = ds.get("dir") or os.environ.get("MNIST_DATA_DIR")
        if not root:
            raise ConfigError("mnist-idx needs dataset.dir or MNIST_DATA_DIR")
        train, val, test = datasets.psmnist_splits(
            os.path.join(root, "train-images-idx3-ubyte"),
            os.path.join(root, "train-labels-idx1-ubyte"),
            os.path.join(root, "t10k-images-idx3-ubyte"),
            os.path.join(root, "t10k-labels-idx1-ubyte"),
            permute_seed=permute_seed)
    elif kind == "csv":
        if not ds.get("data") or not ds.get("labels"):
            raise ConfigError("csv dataset needs --data and --labels paths")
        train = datasets.load_csv_sequences(ds["data"], ds["labels"], split="train")
        if ds.get("val_data"):
            val = datasets.load_csv_sequences(ds["val_data"], ds["val_labels"],
                                              num_classes=train.num_classes,
                                              split="val")
        else:
            val = None
        test = val
    else:
        raise ConfigError(f"unknown dataset kind {kind!r} (expected mnist-idx or csv)")
    limit = ds.get("limit")
    if limit:
        train = train.subset(np.arange(min(int(limit), len(train))))
        if val is not None:
            val = val.subset(np.arange(min(int(limit), len(val))))
        if test is not None and test is not val:
            test = test.subset(np.arange(min(int(limit), len(test))))
    return train, val, test


def _eval_dataset(cfg: dict):
    train, val, test = _load_splits(cfg)
    which = (cfg.get("dataset") or {}).get("eval_split", "test")
    picked = {"train": train, "val": val, "test": test}.get(which)
    if picked is None:
        raise ConfigError(f"split {which!r} not available for this dataset")
    return picked


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _echo_run(out_dir, cfg: dict, model, perm) -> None:
    os.makedirs(out_dir, exist_ok=True)
    echo = dict(cfg)
    echo["model"] = model_mod.config_to_dict(model.cfg)
    echo["version"] = __version__
    _write_json(os.path.join(out_dir, "config.json"), echo)
    if perm is not None:
        with open(os.path.join(out_dir, "permutation.csv"), "w") as fh:
            fh.write("target_t,source_t\n")
            for i, src in enumerate(perm):
                fh.write(f"{i},{int(src)}\n")


# -- subcommands --------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = args.out or "lmuformer-run"
    seed = int(cfg["train"]["seed"])
    train_ds, val_ds, test_ds = _load_splits(cfg)
    model = _build_model(cfg, seed)
    _echo_run(out, cfg, model, train_ds.permutation)

    optim = training.OptimConfig(**(cfg.get("optim") or {}))
    ckpt = os.path.join(out, "checkpoint.bin")
    t0 = time.time()
    history = training.train(
        model, train_ds.stack(), optim,
        epochs=int(cfg["train"]["epochs"]),
        batch_size=int(cfg["train"]["batch_size"]),
        rng=numerics.RngSpec(seed),
        val_data=val_ds.stack() if val_ds is not None else None,
        checkpoint_path=ckpt,
        history_path=os.path.join(out, "history.csv"),
        log=print)
    report = {"seconds": time.time() - t0,
              "epochs": len(history),
              "final_train_acc": history[-1]["train_acc"],
              "final_val_acc": history[-1]["val_acc"]}
    if val_ds is not None and os.path.exists(ckpt):
        model = model_mod.load(ckpt)  # best-validation weights
    if test_ds is not None:
        X, y = test_ds.stack()
        report["test_acc"] = training.evaluate(model, X, y)
        print(f"test accuracy {report['test_acc']:.4f}")
    if not os.path.exists(ckpt):
        model_mod.save(model, ckpt)
    _write_json(os.path.join(out, "report.json"), report)
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    model = model_mod.load(args.checkpoint)
    ds = _eval_dataset(cfg)
    X, y = ds.stack()
    acc = training.evaluate(model, X, y)
    print(f"accuracy {acc:.4f} on {len(y)} samples")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "report.json"),
                    {"accuracy": acc, "n": int(len(y))})
    return 0


def cmd_stream(args) -> int:
    cfg = _resolve(args)
    model = model_mod.load(args.checkpoint)
    ds = _eval_dataset(cfg)
    X, y = ds.stack()
    correct = 0
    max_dev = 0.0
    for xi, yi in zip(X, y):
        logits = streaming.stream_logits(model, xi)
        ref = model.forward_stepwise(xi)
        max_dev = max(max_dev, float(np.max(np.abs(logits - ref))))
        correct += int(np.argmax(logits) == yi)
    acc = correct / len(y)
    print(f"streaming accuracy {acc:.4f} on {len(y)} samples; "
          f"max |stream - stepwise| = {max_dev:.3e}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "report.json"),
                    {"accuracy": acc, "n": int(len(y)), "max_deviation": max_dev})
    return 0


def cmd_sweep_prefix(args) -> int:
    cfg = _resolve(args)
    model = model_mod.load(args.checkpoint)
    ds = _eval_dataset(cfg)
    X, y = ds.stack()
    prefixes = ([int(p) for p in args.prefixes.split(",")]
                if args.prefixes else None)
    rows = streaming.prefix_sweep(model, X, y, prefixes)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    curve = os.path.join(out, "prefix_curve.csv")
    streaming.write_prefix_csv(curve, rows)
    p99 = streaming.prefix_reaching(rows, 0.99)
    full = rows[-1]
    print(f"full-length accuracy {full['accuracy']:.4f}; "
          f"99% of it reached at prefix {p99}/{full['prefix_len']}")
    _write_json(os.path.join(out, "report.json"),
                {"rows": rows, "prefix_99": p99})
    return 0


def cmd_count_ops(args) -> int:
    cfg = _resolve(args)
    if args.checkpoint:
        model = model_mod.load(args.checkpoint)
    else:
        model = _build_model(cfg, int(cfg["train"]["seed"]))
    T = args.seq_len
    report = efficiency.count_flops(model, T)
    em = efficiency.EnergyModel()
    if args.measure:
        ds = _eval_dataset(cfg)
        X, _ = ds.stack()
        report = efficiency.measure_sparsity(model, X[:min(len(X), 32)])
    payload = efficiency.report_json(report, em, spiking=model.cfg.spiking)
    print(f"T={T}: {report.total_macs} MACs, "
          f"{report.synaptic_ops():.0f} synaptic ops, "
          f"energy {payload['energy_pj']:.1f} pJ "
          f"({'spiking' if model.cfg.spiking else 'dense'})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "report.json"), payload)
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    spiking = bool(args.spiking)
    with numerics.precision(np.float64):
        cfg = model_mod.psmnist_config(spiking=spiking, channels=6, order=5,
                                       theta=16.0, num_classes=3)
        model = model_mod.build(cfg, numerics.RngSpec(seed))
        rng = numerics.RngSpec(seed + 1).generator()
        X = rng.standard_normal((4, 16, 1))
        y = rng.integers(0, 3, size=4)
        worst = training.finite_diff_check(
            model, (X, y), n_coords=args.coords,
            rng=numerics.RngSpec(seed + 2).generator(), smooth=spiking)
    tol = 1e-3 if spiking else 1e-4
    status = "PASS" if worst <= tol else "FAIL"
    print(f"{status} gradcheck: max rel err {worst:.3e} (tol {tol:g}, "
          f"{'smoothed spiking' if spiking else 'non-spiking'})")
    return 0 if worst <= tol else 5


def cmd_selftest(args) -> int:
    from .lmu import (LMUConfig, build_matrices, lmu_scan_parallel,
                      lmu_scan_sequential)

    failures = 0

    def check(name: str, ok: bool, detail: str = "") -> None:
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else ""))
        failures += 0 if ok else 1

    rng = numerics.RngSpec(7).generator()
    worst = 0.0
    for _ in range(10):
        d = int(rng.integers(2, 33))
        T = int(rng.integers(8, 129))
        mats = build_matrices(LMUConfig(d, float(rng.uniform(max(d, 4), 512)), "zoh"))
        u = rng.standard_normal((T, 3)).astype(numerics.default_dtype())
        err = float(np.max(np.abs(lmu_scan_parallel(u, mats)
                                  - lmu_scan_sequential(u, mats))))
        worst = max(worst, err)
    check("parallel/sequential scan", worst <= 1e-6, f"max err {worst:.2e}")

    for spiking in (False, True):
        mc = model_mod.sc_config(spiking=spiking, width=8, order=4,
                                 num_pairs=1, theta=16.0)
        m = model_mod.build(mc, numerics.RngSpec(11))
        x = numerics.RngSpec(13).generator().standard_normal((24, 1))
        x = x.astype(numerics.default_dtype())
        got = streaming.stream_logits(m, x)
        ref = m.forward_stepwise(x)
        batch = m.forward(x[None], mode="eval").data[0]
        tag = "spiking" if spiking else "non-spiking"
        dev = float(np.max(np.abs(got - batch)))
        if spiking:
            check("streaming/stepwise bitwise (spiking)",
                  bool(np.array_equal(got, ref)))
        else:
            err = float(np.max(np.abs(got - ref)))
            check("streaming/stepwise (non-spiking)", err <= 1e-6,
                  f"max err {err:.2e}")
        check(f"streaming/batch ({tag})", dev <= 1e-6, f"max dev {dev:.2e}")
        check(f"embed delay formula ({tag})", m.embed.delay == 9,
              f"delay {m.embed.delay}")

    import tempfile
    mc = model_mod.psmnist_config(channels=6, order=5, theta=16.0)
    m = model_mod.build(mc, numerics.RngSpec(3))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ck.bin")
        model_mod.save(m, path)
        m2 = model_mod.load(path)
        same = all(np.array_equal(p.data, q.data)
                   for p, q in zip(m.parameters(), m2.parameters()))
    check("checkpoint round-trip", same)

    return 0 if failures == 0 else 1


def cmd_export_csv(args) -> int:
    cfg = _resolve(args)
    ds = _eval_dataset(cfg)
    datasets.save_csv_sequences(args.out_data, args.out_labels, ds)
    print(f"wrote {len(ds)} sequences to {args.out_data}")
    return 0


# -- parser -------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, with_data: bool = True) -> None:
    p.add_argument("--config", help="JSON run config (flags override)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run/output directory")
    if with_data:
        p.add_argument("--dataset", choices=["mnist-idx", "csv"])
        p.add_argument("--data-dir", dest="data_dir",
                       help="directory with the four IDX files")
        p.add_argument("--data", help="CSV sequence file (sample_id,t,c_0..)")
        p.add_argument("--labels", help="CSV label file (sample_id,label)")
        p.add_argument("--permute-seed", dest="permute_seed", type=int)
        p.add_argument("--limit", type=int, help="cap samples per split")
        p.add_argument("--eval-split", dest="eval_split",
                       choices=["train", "val", "test"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmuformer",
        description="Convolutional-attention-free sequence models with "
                    "Legendre memory, optionally fully spiking.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--spiking", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stream", help="sample-by-sample inference check")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("sweep-prefix", help="accuracy vs. observed prefix length")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prefixes", help="comma-separated prefix lengths")
    p.set_defaults(func=cmd_sweep_prefix)

    p = sub.add_parser("count-ops", help="analytic MAC/synaptic-op/energy report")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--seq-len", dest="seq_len", type=int, default=784)
    p.add_argument("--spiking", action="store_true")
    p.add_argument("--measure", action="store_true",
                   help="measure spike densities on dataset samples")
    p.set_defaults(func=cmd_count_ops)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int)
    p.add_argument("--spiking", action="store_true")
    p.add_argument("--coords", type=int, default=50)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="equivalence and round-trip checks")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("export-csv", help="write a dataset in the CSV schema")
    _add_common(p, with_data=True)
    p.add_argument("--out-data", dest="out_data", required=True)
    p.add_argument("--out-labels", dest="out_labels", required=True)
    p.set_defaults(func=cmd_export_csv)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LMUFormerError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main(argv=sys.argv[1:]))
