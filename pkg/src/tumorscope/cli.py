"""Command-line entry point: synth, train, crossval, eval and regions.

Exit codes: 0 success, 2 usage, 3 input/output, 4 numerical failure,
5 model/data mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from tumorscope import data, evaluation as ev, models, regions
from tumorscope.optim import EpochStats, NumericalError, PlateauSchedule, TrainConfig, train
from tumorscope.tensorcore import NonFiniteError, RngState

log = logging.getLogger("tumorscope")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4, 5

# RNG stream ids under the run seed
STREAM_SPLIT, STREAM_INIT, STREAM_TRAIN, STREAM_FOLDS = 0, 1, 2, 3

# epochs / batch size used when the config leaves them unset
MODEL_DEFAULTS = {
    "cnn3": {"epochs": 30, "batch_size": 32},
    "unet": {"epochs": 14, "batch_size": 10},
    "tlhead": {"epochs": 30, "batch_size": 32},
}


class UsageError(Exception):
    pass


class MismatchError(Exception):
    pass


# ---------------------------------------------------------------- run configuration

@dataclass
class RunConfig:
    model: str = "cnn3"
    data: str = ""
    out: str = ""
    size: int = 64
    epochs: int = 0
    batch_size: int = 0
    lr: float = 1e-3
    seed: int = 0
    k: int = 5
    test_fraction: float = 0.2
    class_weights: str = "balanced"
    schedule: str = "plateau"
    l2: float = 1e-4
    base_filters: int = 8
    backbone_filters: str = "8,16"
    tl_dropout: float = 0.2

    def validate(self) -> "RunConfig":
        if self.model not in MODEL_DEFAULTS:
            raise UsageError(f"model must be one of {sorted(MODEL_DEFAULTS)}, got {self.model!r}")
        for key, val in MODEL_DEFAULTS[self.model].items():
            if getattr(self, key) == 0:
                setattr(self, key, val)
        checks = [
            (self.size >= 16, "size must be >= 16"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr >= 0, "lr must be >= 0"),
            (0 <= self.seed < 2**64, "seed must be a non-negative 64-bit integer"),
            (self.k >= 2, "k must be >= 2"),
            (0 < self.test_fraction < 1, "test_fraction must lie in (0, 1)"),
            (self.class_weights in ("balanced", "none"), "class_weights must be 'balanced' or 'none'"),
            (self.schedule in ("plateau", "none"), "schedule must be 'plateau' or 'none'"),
            (self.l2 >= 0, "l2 must be >= 0"),
            (self.base_filters >= 1, "base_filters must be >= 1"),
            (0 <= self.tl_dropout < 1, "tl_dropout must lie in [0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise UsageError(msg)
        try:
            filters = self.filters()
        except ValueError:
            filters = ()
        if not filters or min(filters) < 1:
            raise UsageError(f"backbone_filters must be a comma-separated list of positive ints, got {self.backbone_filters!r}")
        return self

    def filters(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self.backbone_filters.split(",") if v.strip())

    def dump(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def read_config(path) -> dict[str, tuple[str, int]]:
    """Parse ``key = value`` lines into ``{key: (value, line number)}``; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        out[key] = (value.strip(), lineno)
    return out


def _coerce(key: str, value, where: str):
    typ = CONFIG_TYPES[key]
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return str(value)
    except ValueError:
        raise UsageError(f"{where}: {key} expects {typ}, got {value!r}") from None


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then command-line flags."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            raw = read_config(args.config)
        except OSError as e:
            raise OSError(f"cannot read config {args.config}: {e.strerror}") from e
        for key, (value, lineno) in raw.items():
            if key not in CONFIG_TYPES:
                raise UsageError(f"{args.config}:{lineno}: unknown key {key!r}")
            setattr(cfg, key, _coerce(key, value, f"{args.config}:{lineno}"))
    for key in CONFIG_TYPES:
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, _coerce(key, value, f"--{key.replace('_', '-')}"))
    if not cfg.data:
        raise UsageError("no dataset given (--data or 'data' in the config)")
    if not cfg.out:
        raise UsageError("no output directory given (--out or 'out' in the config)")
    return cfg.validate()


def build_model(cfg: RunConfig, classes: int) -> models.ModelSpec:
    rng = RngState(cfg.seed).split(STREAM_INIT)
    shape = (cfg.size, cfg.size, 1)
    try:
        if cfg.model == "cnn3":
            return models.build_cnn3(shape, classes, rng, l2=cfg.l2)
        if cfg.model == "unet":
            return models.build_unet_classifier(shape, classes, rng, base_filters=cfg.base_filters)
        backbone = models.make_toy_backbone(shape, rng.split(0), filters=cfg.filters())
        return models.build_tl_head(backbone, classes, cfg.tl_dropout, rng.split(1))
    except models.ModelError as e:
        raise UsageError(f"cannot build {cfg.model} for {cfg.size}x{cfg.size} input: {e}") from e


def train_config(cfg: RunConfig, labels: np.ndarray, classes: int) -> TrainConfig:
    weights = None
    if cfg.class_weights == "balanced":
        try:
            weights = ev.class_weights(labels, classes).tolist()
        except ev.EvaluationError as e:
            raise MismatchError(f"cannot balance class weights: {e}") from e
    # the plateau schedule watches the training loss so held-out data never steers training
    return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, class_weights=weights,
                       seed=cfg.seed, schedule=PlateauSchedule() if cfg.schedule == "plateau" else None,
                       monitor="loss")


def write_stats(stats: list[EpochStats], path) -> None:
    def fmt(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "acc", "val_loss", "val_acc", "lr"])
        for s in stats:
            w.writerow([s.epoch, fmt(s.loss), fmt(s.acc), fmt(s.val_loss), fmt(s.val_acc), fmt(s.lr)])


def _load_dataset(cfg: RunConfig):
    manifest = data.load_manifest(cfg.data)
    if len(manifest.classes) < 2:
        raise MismatchError("need at least two classes to train")
    return manifest, manifest.load((cfg.size, cfg.size)), manifest.labels


def _split(cfg: RunConfig, labels: np.ndarray):
    try:
        return ev.stratified_split(labels, cfg.test_fraction, RngState(cfg.seed).split(STREAM_SPLIT))
    except ev.EvaluationError as e:
        raise MismatchError(f"cannot split dataset: {e}") from e


def _fit(cfg, model, x, y, classes, validation):
    return train(model, x, y, train_config(cfg, y, classes), validation=validation,
                 rng=RngState(cfg.seed).split(STREAM_TRAIN))


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    spec = data.SyntheticSpec(per_class=args.per_class, size=args.size, noise=args.noise, seed=args.seed)
    manifest = data.synth_generate(spec, args.out)
    path = Path(args.out) / "manifest.csv"
    log.info("wrote %d images", len(manifest))
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.dump())
    manifest, x, y = _load_dataset(cfg)
    c = len(manifest.classes)
    tr, te = _split(cfg, y)
    model = build_model(cfg, c)
    model.meta["classes"] = list(manifest.classes)
    trained, stats = _fit(cfg, model, x[tr], y[tr], c, (x[te], y[te]))
    trained.meta["classes"] = list(manifest.classes)
    models.save_checkpoint(trained, out / "model.tbck")
    write_stats(stats, out / "stats.csv")
    test = data.DatasetManifest([(str(manifest.resolve(p).resolve()), lab) for p, lab in manifest.subset(te).records],
                                manifest.classes, out)
    data.write_manifest(test, out / "test_manifest.csv")
    probs = models.predict_proba(trained, x[te])
    report = ev.build_report(y[te], probs, manifest.classes, model=trained.name, dataset=str(cfg.data),
                             seed=cfg.seed)
    ev.write_report(report, out / "report")
    print(f"test accuracy {report.summary.accuracy:.4f} on {len(te)} images; outputs in {out}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.dump())
    manifest, x, y = _load_dataset(cfg)
    c = len(manifest.classes)
    pool, _ = _split(cfg, y)
    try:
        plan = ev.stratified_kfold(y[pool], cfg.k, RngState(cfg.seed).split(STREAM_FOLDS))
    except ev.EvaluationError as e:
        raise MismatchError(f"cannot build {cfg.k} folds: {e}") from e
    reports = []
    counts = []
    for i in range(cfg.k):
        tr, va = (pool[idx] for idx in plan.split(i))
        model = build_model(cfg, c)
        trained, stats = _fit(cfg, model, x[tr], y[tr], c, (x[va], y[va]))
        fold_dir = out / f"fold_{i}"
        fold_dir.mkdir(exist_ok=True)
        write_stats(stats, fold_dir / "stats.csv")
        rep = ev.build_report(y[va], models.predict_proba(trained, x[va]), manifest.classes, model=trained.name,
                              dataset=str(cfg.data), seed=cfg.seed, fold=i)
        ev.write_report(rep, fold_dir / "report")
        reports.append(rep)
        counts.append(np.bincount(y[va], minlength=c).tolist())
        log.info("fold %d accuracy %.4f", i, rep.summary.accuracy)
    summary = ev.write_fold_table(reports, out / "folds.csv")
    with open(out / "fold_counts.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold"] + list(manifest.classes))
        w.writerows([i] + row for i, row in enumerate(counts))
    mean, sd = summary["accuracy"]
    print(f"{cfg.k}-fold accuracy {mean:.4f} +/- {sd:.4f}; outputs in {out}")
    return EXIT_OK


def read_class_map(path) -> dict[str, str]:
    return {k: v for k, (v, _) in read_config(path).items()}


def cmd_eval(args) -> int:
    model = models.load_checkpoint(args.checkpoint)
    manifest = data.load_manifest(args.data)
    if model.class_count is None:
        raise MismatchError("checkpoint holds a feature extractor without a classifier")
    model_classes = list(model.meta.get("classes") or [str(i) for i in range(model.class_count)])
    if len(model_classes) != model.class_count:
        raise MismatchError(f"checkpoint lists {len(model_classes)} class names for {model.class_count} outputs")
    size = model.input_shape[:2]
    out = Path(args.report)
    if args.exclude or args.class_map:
        cmap = read_class_map(args.class_map) if args.class_map else None

        def loader(paths):
            return data.load_images([manifest.resolve(p) for p in paths], size)

        try:
            report = ev.cross_dataset_eval(model, manifest.records, manifest.classes, loader, cmap,
                                           exclude=args.exclude or (), model_classes=model_classes,
                                           dataset=str(args.data), batch_size=args.batch_size)
        except ev.EvaluationError as e:
            raise MismatchError(str(e)) from e
    else:
        if list(manifest.classes) != model_classes:
            raise MismatchError(f"dataset classes {manifest.classes} differ from checkpoint classes {model_classes}; "
                                "use --class-map or --exclude for an external set")
        x = manifest.load(size)
        probs = models.predict_proba(model, x, args.batch_size)
        report = ev.build_report(manifest.labels, probs, model_classes, model=model.name, dataset=str(args.data),
                                 seed=model.meta.get("seed"))
    ev.write_report(report, out)
    tag = "external " if report.external else ""
    print(f"{tag}accuracy {report.summary.accuracy:.4f} on {report.confusion.total} images; report in {out}")
    return EXIT_OK


def _boxes_for(image: Path, boxes_file: Path) -> list[tuple[regions.Box, int]]:
    table = regions.read_boxes(boxes_file)
    target = image.resolve()
    found = []
    for name, rows in table.items():
        p = Path(name)
        cand = p if p.is_absolute() else boxes_file.parent / p
        if cand.resolve() == target or name == str(image):
            found.extend(rows)
    return found


def cmd_regions(args) -> int:
    params = regions.SegmentationParams(tau=args.tau, min_size=args.min_size, max_proposals=args.max_proposals)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text("".join(f"{k} = {v}\n" for k, v in (
        ("image", args.image), ("boxes", args.boxes), ("iou", args.iou), ("checkpoint", args.checkpoint or ""),
        ("tau", params.tau), ("min_size", params.min_size), ("max_proposals", params.max_proposals))))
    image = data.load_image(args.image)
    boxes_path = Path(args.boxes)
    if not boxes_path.is_file():
        raise OSError(f"boxes file {boxes_path} not found")
    gt_rows = _boxes_for(Path(args.image), boxes_path)
    gts = [b for b, _ in gt_rows]
    proposals = regions.selective_search(image, params)
    kept = regions.filter_proposals(proposals, gts, args.iou)
    preds = None
    if args.checkpoint:
        model = models.load_checkpoint(args.checkpoint)
        try:
            preds = regions.classify_boxes(image, model, [k.proposal for k in kept])
        except regions.RegionError as e:
            raise MismatchError(str(e)) from e
    regions.write_proposals(out / "proposals.csv", proposals)
    with open(out / "kept.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x0", "y0", "x1", "y1", "score", "gt_index", "iou"] + (["class", "prob"] if preds else []))
        for j, k in enumerate(kept):
            row = [*k.proposal.box.as_tuple(), repr(k.proposal.score), k.gt_index, repr(k.iou)]
            if preds:
                row += [preds[j].label, repr(preds[j].prob)]
            w.writerow(row)
    best = regions.best_iou_per_gt(proposals, gts)
    summary = {
        "image": str(args.image),
        "iou_threshold": args.iou,
        "proposal_count": len(proposals),
        "kept_count": len(kept),
        "ground_truth": [{"box": list(b.as_tuple()), "label": lab, "best_iou": v, "kept": v > args.iou}
                         for (b, lab), v in zip(gt_rows, best)],
        "classified": preds is not None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{len(proposals)} proposals, {len(kept)} kept at IoU > {args.iou}; outputs in {out}")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing

def _bounded(kind, lo=None, hi=None, lo_open=False):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} value {text!r}") from None
        if lo is not None and (v <= lo if lo_open else v < lo):
            raise argparse.ArgumentTypeError(f"must be {'>' if lo_open else '>='} {lo}, got {v}")
        if hi is not None and v > hi:
            raise argparse.ArgumentTypeError(f"must be <= {hi}, got {v}")
        return v
    return parse


def _add_run_flags(p: argparse.ArgumentParser, with_k: bool) -> None:
    # defaults stay None so config-file values survive unless a flag is given
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--data", help="manifest.csv of the dataset")
    p.add_argument("--model", choices=sorted(MODEL_DEFAULTS))
    p.add_argument("--out", help="output directory")
    p.add_argument("--size", type=int, help="square input size in pixels (default 64)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--class-weights", dest="class_weights", choices=["balanced", "none"])
    p.add_argument("--schedule", choices=["plateau", "none"])
    p.add_argument("--l2", type=float)
    p.add_argument("--base-filters", dest="base_filters", type=int, help="U-Net width multiplier (64 = full width)")
    p.add_argument("--backbone-filters", dest="backbone_filters", help="tlhead backbone widths, e.g. 8,16")
    p.add_argument("--tl-dropout", dest="tl_dropout", type=float)
    if with_k:
        p.add_argument("--k", type=_bounded(int, 2), help="number of folds (>= 2)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tumorscope", description="Brain-tumour MRI classification toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic 3-class blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", dest="per_class", type=_bounded(int, 1), default=100)
    p.add_argument("--size", type=_bounded(int, 16), default=64)
    p.add_argument("--seed", type=_bounded(int, 0), default=0)
    p.add_argument("--noise", type=_bounded(float, 0), default=0.03)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="80/20 split, train, write checkpoint, stats and test report")
    _add_run_flags(p, with_k=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", help="stratified k-fold cross-validation over the training pool")
    _add_run_flags(p, with_k=True)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an internal or external dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--exclude", action="append", default=[], metavar="CLASS")
    p.add_argument("--class-map", dest="class_map", help="file of 'external = model' class-name lines")
    p.add_argument("--report", required=True, help="report output directory")
    p.add_argument("--batch-size", dest="batch_size", type=_bounded(int, 1), default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("regions", help="selective search, IoU filtering and optional region classification")
    p.add_argument("--image", required=True)
    p.add_argument("--boxes", required=True, help="CSV image_path,x0,y0,x1,y1,label")
    p.add_argument("--iou", type=_bounded(float, 0, 1, lo_open=True), default=0.7)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=_bounded(float, 0), default=8.0)
    p.add_argument("--min-size", dest="min_size", type=_bounded(int, 1), default=20)
    p.add_argument("--max-proposals", dest="max_proposals", type=_bounded(int, 1), default=200)
    p.set_defaults(func=cmd_regions)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except regions.BoxFileError as e:
        print(f"malformed boxes file: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, NonFiniteError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except MismatchError as e:
        print(f"model/data mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, data.DataError, models.CheckpointError) as e:
        code = getattr(e, "code", None)
        print(f"io error{f' [{code}]' if isinstance(code, str) else ''}: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
