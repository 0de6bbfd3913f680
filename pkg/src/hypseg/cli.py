"""``hypseg`` command line: synth, fit-stats, train, predict, evaluate, param-count.

Exit status is 0 on success, 1 when a computation fails and 2 for bad
input or usage. Every command except param-count writes a run manifest
listing each input and output with its SHA-256.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .metrics import aggregate_folds, confusion, macro_metrics, row_normalized
from .models.networks import MODEL_KINDS, build_network, describe, trainable_count
from .preprocessing import NormalizationStats, fit_band_stats, impute_nans
from .synth import SynthConfig, synth_scene
from .tensor import precision
from .tiling import predict_scene
from .training import TrainConfig, kfold_split

logger = logging.getLogger("hypseg")

FUSION = ("combined-mlp", "combined-cnn")


class UsageError(Exception):
    """Bad flags or unusable input files (exit 2)."""


# -- manifest ---------------------------------------------------------------------


class RunManifest:
    def __init__(self, command: str, argv):
        self.doc = {"command": command, "argv": list(argv), "config": {}, "config_digest": None,
                    "config_sources": {}, "seeds": {}, "inputs": [], "outputs": []}
        self._start = time.perf_counter()

    def set_config(self, config: dict, sources: dict | None = None):
        self.doc["config"] = config
        self.doc["config_digest"] = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()
        if sources:
            self.doc["config_sources"] = sources

    def add_input(self, path):
        self.doc["inputs"].append({"path": str(path), "sha256": io.file_sha256(path)})

    def add_output(self, path):
        self.doc["outputs"].append({"path": str(path), "sha256": io.file_sha256(path)})

    def write(self, path) -> None:
        self.doc["wall_clock_seconds"] = round(time.perf_counter() - self._start, 3)
        Path(path).write_text(json.dumps(self.doc, indent=2, sort_keys=True))


def write_json(path, doc) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


# -- shared helpers ---------------------------------------------------------------


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _read_scene(path) -> io.HscScene:
    return io.read_hsc(_need_file(path, "scene file"))


def _list_scenes(source) -> list[Path]:
    """A directory of .hsc files or a text file with one path per line."""
    p = Path(source)
    if p.is_dir():
        paths = sorted(p.glob("*.hsc"))
    elif p.is_file():
        paths = []
        for line in p.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            q = Path(line)
            if not q.is_absolute() and not q.exists():
                q = p.parent / q
            paths.append(q)
    else:
        raise UsageError(f"scene list not found: {p}")
    for q in paths:
        _need_file(q, "scene file")
    if not paths:
        raise UsageError(f"no scenes found in {p}")
    return paths


def _load_stats(path) -> NormalizationStats:
    try:
        return NormalizationStats.load(_need_file(path, "stats file"))
    except (KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"unreadable stats file {path}: {exc}") from None


def _thread_cap() -> int | None:
    raw = os.environ.get("HYPSEG_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HYPSEG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"HYPSEG_THREADS must be a positive integer, got {raw!r}")
    return n


# -- synth ------------------------------------------------------------------------


def cmd_synth(args, manifest: RunManifest):
    config = SynthConfig.load(_need_file(args.config, "synth config")) if args.config else SynthConfig()
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.config:
        manifest.add_input(args.config)
    manifest.set_config(config.to_dict())
    seeds = [args.seed + i for i in range(args.count)]
    manifest.doc["seeds"] = {"scenes": seeds}
    for i, seed in enumerate(seeds):
        cube, mask = synth_scene(config, seed)
        path = out / f"scene_{i:04d}.hsc"
        io.write_hsc(path, cube, mask, config.classes)
        manifest.add_output(path)
    logger.info("wrote %d scenes to %s", args.count, out)
    return out / "manifest.json"


# -- fit-stats ----------------------------------------------------------------------


def cmd_fit_stats(args, manifest: RunManifest):
    paths = _list_scenes(args.train_list)
    cubes = []
    for p in paths:
        cubes.append(impute_nans(_read_scene(p).cube))
        manifest.add_input(p)
    stats = fit_band_stats(cubes, fold=args.fold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stats.save(out)
    manifest.add_output(out)
    manifest.set_config({"fold": args.fold, "scenes": [str(p) for p in paths]})
    return out.with_name(out.stem + "_manifest.json")


# -- train ----------------------------------------------------------------------------


TRAIN_FLAGS = ("learning_rate", "batch_size", "max_epochs", "patience", "seed", "crop_size", "data_source")


def resolve_train_config(args) -> tuple[TrainConfig, dict]:
    """flags > config file > built-in defaults; returns the config and the source of each field."""
    doc, sources = {}, {}
    if args.config:
        try:
            file_doc = json.loads(_need_file(args.config, "training config").read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"training config is not valid JSON: {exc}") from None
        doc.update(file_doc)
        sources.update({k: "config" for k in file_doc})
    for name in TRAIN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            doc[name] = value
            sources[name] = "flag"
    try:
        config = TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None
    for name in config.to_dict():
        sources.setdefault(name, "default")
    if config.learning_rate is None:
        sources["learning_rate"] = "default-table"
    return config, sources


def _load_base(path, kind, fold):
    p = _need_file(str(path).format(fold=fold), f"--base-{kind} checkpoint")
    net, ckpt = io.load_checkpoint(p)
    if net.descriptor["kind"] != kind:
        raise UsageError(f"--base-{kind} checkpoint holds a {net.descriptor['kind']!r} network")
    return net, ckpt, p


def _train_fold(args, fold, paths, config: TrainConfig, sources: dict, argv):
    """Train one fold; returns the manifest path."""
    from .estimators import SEGMENTERS

    manifest = RunManifest("train", argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{args.model}_fold{fold.index}"
    scenes = {p: _read_scene(p) for p in fold.train + fold.val}
    for p in fold.train + fold.val:
        manifest.add_input(p)
    tr_x = [scenes[p].cube for p in fold.train]
    tr_y = [scenes[p].mask for p in fold.train]
    va_x = [scenes[p].cube for p in fold.val]
    va_y = [scenes[p].mask for p in fold.val]
    if any(m is None for m in tr_y + va_y):
        raise UsageError("training scenes must carry a mask")
    K = args.classes or max(scenes[p].n_classes for p in scenes) or int(max(m.max() for m in tr_y)) + 1

    cls = SEGMENTERS[args.model]
    if args.model == "ilr":
        est = cls(n_classes=K, seed=config.seed, precision=config.precision)
        if config.learning_rate is not None:
            est.set_params(learning_rate=config.learning_rate)
    else:
        params = dict(n_classes=K, learning_rate=config.learning_rate, batch_size=config.batch_size,
                      max_epochs=config.max_epochs, patience=config.patience, seed=config.seed,
                      augment=config.augment, crop_size=config.crop_size, precision=config.precision,
                      data_source=config.data_source)
        if args.model in FUSION:
            from .estimators import SCANSegmenter, UNetSegmenter

            bases = []
            for kind, flag, bcls in (("unet", args.base_unet, UNetSegmenter), ("scan", args.base_scan, SCANSegmenter)):
                net, ckpt, p = _load_base(flag, kind, fold.index)
                manifest.add_input(p)
                b = bcls(n_classes=K)
                b.net_, b.classes_, b.n_features_in_ = net, np.arange(K), net.descriptor["bands"]
                b.stats_digest_ = ckpt.header.get("stats_digest")
                bases.append(b)
            params.update(unet=bases[0], scan=bases[1])
        est = cls(**params)

    stats = None
    if args.model != "ilr":
        if args.stats:
            stats = _load_stats(args.stats)
            manifest.add_input(args.stats)
        if args.model in FUSION:
            digests = {b.stats_digest_ for b in (params["unet"], params["scan"])}
            if stats is None or digests != {stats.digest()}:
                raise UsageError("fusion models need --stats matching the stats both base checkpoints were trained with")
            for b in (params["unet"], params["scan"]):
                b.stats_ = stats
        if stats is not None:
            est._fit_stats = lambda cubes, s=stats: s
    est.fit(tr_x, tr_y, va_x, va_y)
    if stats is None and args.model != "ilr":
        stats_path = out / f"stats_fold{fold.index}.json"
        est.stats_.fold = fold.index
        est.stats_.save(stats_path)
        manifest.add_output(stats_path)

    meta = {"model": args.model, "train_scenes": [Path(p).name for p in fold.train],
            "val_scenes": [Path(p).name for p in fold.val], "test_scenes": [Path(p).name for p in fold.test]}
    ckpt_path = out / f"{tag}.hsck"
    est.save(ckpt_path, fold=fold.index, metadata=meta)
    manifest.add_output(ckpt_path)
    history = {"model": args.model, "fold": fold.index, "best_epoch": getattr(est, "best_epoch_", 0),
               "epochs": est.history_}
    if args.model == "ilr":
        history["f1_trace"] = est.result_.f1_trace
        history["components"] = int(est.n_components_)
    hist_path = write_json(out / f"history_{tag}.json", history)
    manifest.add_output(hist_path)
    manifest.set_config(config.to_dict(), sources)
    manifest.doc["seeds"] = {"train": config.seed, "folds": args.fold_seed}
    manifest.doc["fold"] = {"index": fold.index, **meta}
    man_path = out / f"manifest_{tag}.json"
    manifest.write(man_path)
    logger.info("fold %d: wrote %s", fold.index, ckpt_path)
    return man_path


def cmd_train(args, manifest: RunManifest):
    if args.model in FUSION and (not args.base_unet or not args.base_scan):
        raise UsageError(f"{args.model} requires --base-unet and --base-scan")
    if args.model not in FUSION and (args.base_unet or args.base_scan):
        raise UsageError("--base-unet/--base-scan only apply to fusion models")
    config, sources = resolve_train_config(args)
    paths = [str(p) for p in _list_scenes(args.scenes)]
    try:
        folds = kfold_split(paths, k=args.folds, seed=args.fold_seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.fold == "all":
        chosen = folds
    else:
        try:
            k = int(args.fold)
            chosen = [folds[k]]
        except (ValueError, IndexError):
            raise UsageError(f"--fold must be 'all' or an index below {args.folds}, got {args.fold!r}") from None
    workers = min(_thread_cap() or 1, len(chosen))
    argv = manifest.doc["argv"]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_train_fold, [args] * len(chosen), chosen, [paths] * len(chosen),
                          [config] * len(chosen), [sources] * len(chosen), [argv] * len(chosen)))
    else:
        for fold in chosen:
            _train_fold(args, fold, paths, config, sources, argv)
    return None


# -- predict ----------------------------------------------------------------------------


def cmd_predict(args, manifest: RunManifest):
    ckpt_path = _need_file(args.ckpt, "checkpoint")
    try:
        net, ckpt = io.load_checkpoint(ckpt_path)
    except io.FormatError as exc:
        raise UsageError(f"unreadable checkpoint {ckpt_path}: {exc}") from None
    manifest.add_input(ckpt_path)
    stats = None
    if net.descriptor["kind"] != "ilr" or args.stats:
        if not args.stats:
            raise UsageError("--stats is required for this model")
        stats = _load_stats(args.stats)
        manifest.add_input(args.stats)
        want = ckpt.header.get("stats_digest")
        if want is not None and want != stats.digest():
            logger.warning("stats digest differs from the one recorded in the checkpoint")
    inputs = _list_scenes(args.inp) if Path(args.inp).is_dir() else [_need_file(args.inp, "scene file")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    K = net.descriptor["classes"]
    for path in inputs:
        scene = io.read_hsc(path)
        manifest.add_input(path)
        if scene.cube.shape[2] != net.descriptor["bands"]:
            raise UsageError(f"{path} has {scene.cube.shape[2]} bands, model expects {net.descriptor['bands']}")
        probs, mask = predict_scene(net, scene.cube, stats)
        png = out / f"{path.stem}.png"
        io.write_mask_png(png, mask, K)
        manifest.add_output(png)
        manifest.add_output(str(png) + ".json")
        if args.emit_probs:
            ppath = out / f"{path.stem}_probs.hsc"
            io.write_hsc(ppath, probs.astype(np.float32), probs=True)
            manifest.add_output(ppath)
    manifest.set_config({"descriptor": net.descriptor, "emit_probs": bool(args.emit_probs)})
    return out / "manifest.json"


# -- evaluate ------------------------------------------------------------------------------


def _report_doc(cm: np.ndarray) -> dict:
    doc = macro_metrics(cm).to_dict()
    doc["confusion_row_normalized_percent"] = row_normalized(cm).tolist()
    return doc


def cmd_evaluate(args, manifest: RunManifest):
    pred_dir, truth_dir = Path(args.pred_dir), Path(args.truth_dir)
    for d, what in ((pred_dir, "--pred-dir"), (truth_dir, "--truth-dir")):
        if not d.is_dir():
            raise UsageError(f"{what} is not a directory: {d}")
    truths = sorted(truth_dir.glob("*.hsc"))
    if not truths:
        raise UsageError(f"no .hsc truth scenes in {truth_dir}")
    pairs = []
    for t in truths:
        p = pred_dir / f"{t.stem}.png"
        if not p.is_file():
            raise UsageError(f"missing prediction for {t.name}: {p}")
        pairs.append((t, p))
    K = args.classes
    per_scene = {}
    for t, p in pairs:
        scene = io.read_hsc(t)
        if scene.mask is None:
            raise UsageError(f"truth scene {t} has no mask")
        pred = io.read_mask_png(p)
        if pred.shape != scene.mask.shape:
            raise UsageError(f"{p} is {pred.shape}, truth {t} is {scene.mask.shape}")
        k = K or scene.n_classes or int(max(scene.mask.max(), pred.max())) + 1
        per_scene[t.stem] = (pred, scene.mask, k)
        manifest.add_input(t)
        manifest.add_input(p)
    K = max(k for _, _, k in per_scene.values())
    total = np.zeros((K, K), dtype=np.int64)
    for pred, truth, _ in per_scene.values():
        if pred.max() >= K:
            raise UsageError(f"prediction label {int(pred.max())} exceeds {K} classes")
        confusion(pred, truth, K, out=total)
    report = {"classes": K, "scenes": sorted(per_scene), "overall": _report_doc(total)}
    if args.folds:
        try:
            folds = kfold_split(sorted(per_scene), k=args.folds, seed=args.fold_seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        reports, fold_docs = [], []
        for fold in folds:
            cm = np.zeros((K, K), dtype=np.int64)
            for stem in fold.test:
                pred, truth, _ = per_scene[stem]
                confusion(pred, truth, K, out=cm)
            reports.append(macro_metrics(cm))
            fold_docs.append({"index": fold.index, "scenes": sorted(fold.test), **_report_doc(cm)})
        agg = aggregate_folds(reports).to_dict()
        report["folds"] = fold_docs
        report["aggregate"] = {"mean": {m: agg[m] for m in ("accuracy", "macro_precision", "macro_recall", "macro_f1")},
                               "std": agg["std"], "std_kind": agg["std_kind"]}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, report)
    manifest.add_output(out)
    for suffix, matrix in (("counts", total), ("row_normalized", row_normalized(total))):
        img = out.with_name(f"{out.stem}_confusion_{suffix}.png")
        io.write_matrix_png(img, matrix)
        manifest.add_output(img)
    manifest.set_config({"classes": K, "folds": args.folds, "fold_seed": args.fold_seed})
    return out.with_name(out.stem + "_manifest.json")


# -- param-count --------------------------------------------------------------------------


def param_counts(kind: str, bands: int, classes: int) -> tuple[int, int]:
    """(with, without) batch-norm affine parameters for a trainable model kind."""
    with precision("float32"):
        net = build_network(describe(kind, bands, classes), 0)
    return trainable_count(net, True), trainable_count(net, False)


def cmd_param_count(args, manifest):
    if args.bands < 1 or args.classes < 2:
        raise UsageError("--bands must be >= 1 and --classes >= 2")
    if args.model == "ilr":
        n = args.components * (args.bands + args.classes) + args.classes
        print(f"ilr  parameters {n}  ({n / 1e6:.3f}M)  [fixed after fitting, z={args.components}]")
        return None
    with_bn, without_bn = param_counts(args.model, args.bands, args.classes)
    print(f"{args.model}  parameters {with_bn}  ({with_bn / 1e6:.3f}M)  "
          f"without batch-norm affine {without_bn}  ({without_bn / 1e6:.3f}M)")
    return None


# -- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hypseg", description="Cloud and cloud-shadow segmentation of hyperspectral cubes.")
    ap.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic labelled scenes")
    p.add_argument("--config", help="SynthConfig JSON (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("fit-stats", help="fit per-band normalization stats")
    p.add_argument("--train-list", required=True, help="text file of .hsc paths, or a directory")
    p.add_argument("--out", required=True)
    p.add_argument("--fold", default=None)

    p = sub.add_parser("train", help="train one model on one fold (or all folds)")
    p.add_argument("--model", required=True, choices=MODEL_KINDS)
    p.add_argument("--scenes", required=True, help="directory of .hsc scenes or a list file")
    p.add_argument("--fold", default="0", help="fold index or 'all'")
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--fold-seed", type=int, default=0)
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--stats", help="normalization stats JSON (fitted on the fold's training scenes if omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--base-unet", help="U-Net checkpoint for fusion models ({fold} is substituted)")
    p.add_argument("--base-scan", help="SCAN checkpoint for fusion models ({fold} is substituted)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--crop-size", type=int, default=None)
    p.add_argument("--data-source", choices=("methanesat", "methaneair"), default=None)

    p = sub.add_parser("predict", help="tiled inference for one scene or a directory of scenes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--stats")
    p.add_argument("--out", required=True)
    p.add_argument("--emit-probs", action="store_true")

    p = sub.add_parser("evaluate", help="confusion matrices and macro metrics")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--truth-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--fold-seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=None)

    p = sub.add_parser("param-count", help="print trainable parameter counts")
    p.add_argument("--model", required=True, choices=MODEL_KINDS)
    p.add_argument("--bands", type=int, default=1080)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--components", type=int, default=23, help="ILR basis size")
    return ap


COMMANDS = {"synth": cmd_synth, "fit-stats": cmd_fit_stats, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "param-count": cmd_param_count}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    manifest = RunManifest(args.command, argv)
    try:
        cap = _thread_cap()
        if cap is not None:
            from threadpoolctl import threadpool_limits

            threadpool_limits(limits=cap)
        man_path = COMMANDS[args.command](args, manifest)
        if man_path is not None:
            manifest.write(man_path)
    except UsageError as exc:
        print(f"hypseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (io.FormatError, io.ArchitectureMismatchError, FileNotFoundError, ValueError) as exc:
        print(f"hypseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, RuntimeError, MemoryError) as exc:
        print(f"hypseg {args.command}: computation failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
