"""Command-line entry point: one command per pipeline stage.

::

    dacd synth    --config cfg.json --seed 42 --out data
    dacd train    --config cfg.json --mode dsdanet --out run
    dacd finetune run/checkpoint.dsda --config cfg.json --out tuned
    dacd infer    tuned/checkpoint.dsda data/target_t1.mtr data/target_t2.mtr --out maps
    dacd evaluate maps/change_map.mtr data/target_labels.mtr --method dsdanet
    dacd mmd-test a.npy b.npy

Exit status is 0 on success, 1 for invalid configs or arguments, 2 for
missing, unreadable or malformed files. Outputs are written as ``*.partial``
and renamed once the command has succeeded, so a failed run leaves at most a
quarantined partial file behind.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import ConfigError, ExperimentConfig, normalize_mode
from .data import (
    FormatError,
    load_dataset,
    read_label_map,
    read_raster,
    sample_finetune_set,
    sample_training_set,
    synth_generate,
    write_label_map,
    write_pgm,
    write_raster,
)
from .evaluation import cva_change_map, metrics_report
from .kernels import make_kernel_family
from .mmd import mmd2_full_unbiased, mmd2_linear, optimize_beta
from .network import Network, finetune_classifier, infer_change_map, load_checkpoint, save_checkpoint, train
from .protocol import v2_epochs

log = logging.getLogger("dacd")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class Outputs:
    """Files staged as ``<name>.partial`` and published together by :meth:`commit`."""

    def __init__(self, directory):
        self.directory = directory
        self.staged = []

    def path(self, name):
        final = os.path.join(self.directory, name)
        self.staged.append(final)
        return final + ".partial"

    def open(self):
        os.makedirs(self.directory, exist_ok=True)
        return self

    def commit(self):
        for final in self.staged:
            os.replace(final + ".partial", final)
        return list(self.staged)


def _json_dump(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None):
        cfg.train.mode = normalize_mode(args.mode)
    if getattr(args, "data", None):
        cfg.paths.data_dir = args.data
    cfg.validate()
    log.info("resolved config: %s", json.dumps(cfg.resolved(), sort_keys=True))
    return cfg


def _domain(cfg, which, labeled=True):
    prefix = cfg.paths.source_prefix if which == "source" else cfg.paths.target_prefix
    base = os.path.join(cfg.paths.data_dir, prefix)
    labels = f"{base}_labels.mtr"
    if labeled and not os.path.exists(labels):
        raise FileNotFoundError(f"{labels}: label map required for the {which} domain")
    return load_dataset(f"{base}_t1.mtr", f"{base}_t2.mtr", labels if os.path.exists(labels) else None)


def cmd_synth(args):
    cfg = _load_config(args)
    source, target = synth_generate(cfg.synth, cfg.seed)
    out = Outputs(args.out).open()
    for name, ds in (("source", source), ("target", target)):
        write_raster(ds.t1, out.path(f"{name}_t1.mtr"))
        write_raster(ds.t2, out.path(f"{name}_t2.mtr"))
        write_label_map(ds.labels, out.path(f"{name}_labels.mtr"))
    _json_dump({"seed": cfg.seed, "synth": cfg.synth.to_dict()}, out.path("synth_spec.json"))
    return out.commit()


def cmd_train(args):
    cfg = _load_config(args)
    mode = cfg.train.mode
    target = _domain(cfg, "target", labeled=False)
    tcfg = cfg.train_config(mode)
    net = Network(cfg.network, cfg.seed)
    if mode == "dscnet_v2":
        if target.labels is None:
            raise ConfigError("mode v2 trains on labeled target pixels; the target has no label map")
        source = _domain(cfg, "source")
        n_source = sample_training_set(source, cfg.sampling.fraction, cfg.sampling.max_ratio, cfg.seed).n
        labeled = sample_finetune_set(target, cfg.sampling.finetune_count, cfg.seed)
        tcfg.epochs = v2_epochs(tcfg.epochs, n_source, labeled.n, tcfg.batch_size)
        tcfg.unchanged_weight = cfg.finetune.unchanged_weight
        history = train(net, labeled, None, tcfg)
    else:
        source = _domain(cfg, "source")
        train_set = sample_training_set(source, cfg.sampling.fraction, cfg.sampling.max_ratio, cfg.seed)
        history = train(net, train_set, target, tcfg)
    out = Outputs(args.out).open()
    save_checkpoint(net, out.path("checkpoint.dsda"), seed=cfg.seed, extra={"mode": mode, "stage": "train"})
    with open(out.path("train_log.jsonl"), "w", encoding="utf-8") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    _json_dump(cfg.resolved(), out.path("config.json"))
    return out.commit()


def cmd_finetune(args):
    cfg = _load_config(args)
    net, header = load_checkpoint(args.checkpoint)
    target = _domain(cfg, "target")
    labeled = sample_finetune_set(target, cfg.sampling.finetune_count, cfg.seed)
    losses = finetune_classifier(net, labeled, cfg.finetune.epochs, cfg.finetune.lr, cfg.finetune.unchanged_weight)
    extra = dict(header.get("extra") or {}, stage="finetune")
    out = Outputs(args.out).open()
    save_checkpoint(net, out.path("checkpoint.dsda"), seed=header.get("seed"), extra=extra)
    with open(out.path("finetune_log.jsonl"), "w", encoding="utf-8") as fh:
        for epoch, loss in enumerate(losses):
            fh.write(json.dumps({"epoch": epoch, "loss": loss}) + "\n")
    _json_dump(cfg.resolved(), out.path("config.json"))
    return out.commit()


def cmd_infer(args):
    t1, t2 = read_raster(args.t1), read_raster(args.t2)
    if args.cva:
        change = cva_change_map(t1, t2)
    else:
        if not args.checkpoint:
            raise ConfigError("infer needs a checkpoint or --cva")
        net, _ = load_checkpoint(args.checkpoint)
        change = infer_change_map(net, t1, t2)
    out = Outputs(args.out).open()
    write_label_map(change, out.path("change_map.mtr"))
    write_pgm(change, out.path("change_map.pgm"))
    return out.commit()


def cmd_evaluate(args):
    pred = read_label_map(args.map)
    truth = read_label_map(args.truth)
    if np.any(pred == 255):
        raise ConfigError(f"{args.map}: change maps must be binary")
    report = metrics_report(args.method, pred, truth)
    print(json.dumps(report, sort_keys=True))
    if args.out:
        out = Outputs(args.out).open()
        _json_dump(report, out.path(f"metrics_{args.method}.json"))
        return out.commit()
    return []


def _read_samples(path):
    if str(path).endswith(".npy"):
        x = np.load(path, allow_pickle=False)
    else:
        try:
            x = np.loadtxt(path, delimiter=None if not str(path).endswith(".csv") else ",", ndmin=2)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise FormatError(f"{path}: expected a finite 2-D array of samples")
    return x


def cmd_mmd_test(args):
    a, b = _read_samples(args.a), _read_samples(args.b)
    if a.shape[1] != b.shape[1]:
        raise ConfigError(f"sample dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    n = min(len(a), len(b))
    if n < 2:
        raise ConfigError("each sample file needs at least 2 rows")
    # one permutation for both files, so identical inputs pair up exactly
    perm = np.random.default_rng(args.seed).permutation(n)
    la, lb = a[:n][perm], b[:n][perm]
    mk = make_kernel_family(np.concatenate([a, b]), args.kernels, args.spread)
    est = mmd2_linear(la, lb, mk)
    mk = mk.with_coefficients(optimize_beta(est))
    result = {
        "d2_linear": float(mk.beta @ est.per_kernel_d2),
        "d2_full": mmd2_full_unbiased(a, b, mk),
        "per_kernel": [float(v) for v in est.per_kernel_d2],
        "beta": [float(v) for v in mk.beta],
        "bandwidths": [float(v) for v in mk.sigma],
    }
    print(json.dumps(result, sort_keys=True))
    if args.out:
        out = Outputs(args.out).open()
        _json_dump(result, out.path("mmd_test.json"))
        return out.commit()
    return []


def _u64(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser():
    p = argparse.ArgumentParser(prog="dacd", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=_u64, help="overrides the config seed")
        sp.add_argument("--out", required=out_required, help="output directory")

    sp = sub.add_parser("synth", help="write the synthetic source/target benchmark")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one variant and write its checkpoint")
    common(sp)
    sp.add_argument("--mode", choices=["dsdanet", "v1", "v2", "v3"], help="overrides train.mode")
    sp.add_argument("--data", help="overrides paths.data_dir")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", help="fine-tune a checkpoint's classifier on labeled target pixels")
    sp.add_argument("checkpoint")
    common(sp)
    sp.add_argument("--data", help="overrides paths.data_dir")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("infer", help="change map for an image pair (MTR1 + PGM)")
    sp.add_argument("checkpoint", nargs="?")
    sp.add_argument("t1")
    sp.add_argument("t2")
    sp.add_argument("--cva", action="store_true", help="use the CVA baseline instead of a checkpoint")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("evaluate", help="OA / kappa of a change map against ground truth")
    sp.add_argument("map")
    sp.add_argument("truth")
    sp.add_argument("--method", default="model")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("mmd-test", help="MK-MMD between two sample files (.npy, .csv or whitespace text)")
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--kernels", type=int, default=5)
    sp.add_argument("--spread", type=float, default=2.0)
    sp.add_argument("--seed", type=_u64, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_mmd_test)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        written = args.func(args)
    except (FormatError, OSError) as exc:
        print(f"dacd: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"dacd: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for path in written:
        log.info("wrote %s", path)
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
