"""``msgl`` command line: prepare, train, evaluate, gradcheck.

All state flows through a JSON experiment config and flags (flags win over
the config, the config wins over built-in defaults). Every subcommand reads
and writes inside ``--out``::

    artifacts.json            imputer/scaler statistics and class order
    splits/{train,val,test}.split
    summary.json              split membership and window counts
    best.ckpt, last.ckpt, train_log.csv
    eval/                     metrics.json, confusion.csv, roc_*.csv, boundary.csv, *.svg

Exit status: 0 success, 1 validation/data/gradient-check failure, 2 bad
configuration or usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
import warnings
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from msgl.autograd import RngStream, check_parameter_gradients, inject_backward_fault
from msgl.container import read_container, write_container
from msgl.data import (
    DatasetManifest, VideoRecord, load_calms21, load_ratsi, reference_counts, validate_manifest,
)
from msgl.errors import ConfigurationError, MSGLError, UsageError
from msgl.evaluation import (
    boundary_analysis, class_report, compute_confusion, emit_report, roc_auc,
)
from msgl.model import (
    VARIANTS, ModelConfig, classify, count_params, init_params, load_checkpoint, predict_proba,
)
from msgl.preprocessing import Preprocessor, WindowedDataset, load_artifacts, persist_artifacts
from msgl.training import TrainConfig, fit, label_smoothing_ce

logger = logging.getLogger("msgl")

SPLIT_SCHEMA_VERSION = 1
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_DIMS = dict(T=8, D=6, C=3, d_model=16, d_ff=32, heads=4, bam_hidden=16)
CALMS21_VAL_FRACTION = 0.1


# --------------------------------------------------------------------- config

def load_config(ref: Optional[str]) -> dict:
    """Read a JSON config file, or a packaged preset given as ``preset:NAME``."""
    if not ref:
        return {}
    try:
        if ref.startswith("preset:"):
            text = resources.files("msgl.resources.presets").joinpath(ref[7:] + ".json").read_text("utf-8")
        else:
            text = Path(ref).read_text(encoding="utf-8")
    except (FileNotFoundError, OSError) as exc:
        raise ConfigurationError(f"cannot read config {ref}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {ref} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"config {ref} must be a JSON object")
    return doc


def preset_names() -> list[str]:
    root = resources.files("msgl.resources.presets")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config document; returns a flat settings dict."""
    cfg = load_config(args.config)
    dataset = dict(cfg.get("dataset", {}))
    split = dict(cfg.get("split", {}))
    if getattr(args, "dataset", None):
        dataset["name"] = args.dataset
    if getattr(args, "data_root", None):
        dataset["root"] = args.data_root
    if getattr(args, "test_video", None):
        split["test_video"] = args.test_video
    if getattr(args, "val_video", None):
        split["val_video"] = args.val_video
    name = dataset.get("name", "ratsi")
    if name not in ("ratsi", "calms21"):
        raise ConfigurationError(f"unknown dataset {name!r}")
    out = getattr(args, "out", None) or cfg.get("out")
    if not out and args.command != "gradcheck":
        raise ConfigurationError("an output directory is required (--out or config 'out')")
    variant = getattr(args, "variant", None) or cfg.get("variant", "full")
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    evaluation = dict(cfg.get("evaluation", {}))
    if getattr(args, "drop_final_window", False):
        evaluation["drop_final_window"] = True
    return {
        "dataset": name,
        "root": Path(dataset.get("root", Path("data") / name)),
        "split": split,
        "out": Path(out) if out else None,
        "variant": variant,
        "window": int(args.window if getattr(args, "window", None) is not None else cfg.get("window", 35)),
        "seed": int(args.seed if getattr(args, "seed", None) is not None else cfg.get("seed", 0)),
        "model": dict(cfg.get("model", {})),
        "train": dict(cfg.get("train", {})),
        "evaluation": evaluation,
        "validate_counts": bool(getattr(args, "validate_counts", False) or cfg.get("validate_counts", False)),
    }


# --------------------------------------------------------------------- splits

def _ratsi_id(ref) -> str:
    ref = str(ref)
    return f"Observation{int(ref):02d}" if ref.isdigit() else ref


def resolve_split(settings: dict, manifest: DatasetManifest,
                  test_manifest: Optional[DatasetManifest] = None) -> dict[str, list[str]]:
    split = settings["split"]
    if settings["dataset"] == "ratsi":
        if "test_video" not in split or "val_video" not in split:
            raise ConfigurationError("RatSI needs both a test video and a validation video")
        test, val = _ratsi_id(split["test_video"]), _ratsi_id(split["val_video"])
        for vid in (test, val):
            if vid not in manifest.video_ids:
                raise ConfigurationError(f"video {vid!r} is not part of the dataset")
        if test == val:
            raise ConfigurationError("test and validation videos must differ")
        train = [v for v in manifest.video_ids if v not in (test, val)]
        return {"train": train, "val": [val], "test": [test]}
    ids = sorted(manifest.video_ids)
    val = split.get("val_videos") or split.get("val_video")
    if val is None:
        n_val = max(1, math.ceil(CALMS21_VAL_FRACTION * len(ids)))
        val = ids[-n_val:]
    val = [val] if isinstance(val, str) else list(val)
    for vid in val:
        if vid not in ids:
            raise ConfigurationError(f"validation video {vid!r} is not in the CalMS21 training split")
    train = [v for v in ids if v not in val]
    if not train:
        raise ConfigurationError("no CalMS21 training videos left after the validation split")
    return {"train": train, "val": val, "test": sorted(test_manifest.video_ids) if test_manifest else []}


def save_split(path: Path, name: str, ds: WindowedDataset, videos: Sequence[VideoRecord],
               classes: Sequence[str]) -> None:
    vocabulary = sorted({str(x) for v in videos for x in v.labels})
    code = {n: i for i, n in enumerate(vocabulary)}
    lengths = [f.shape[0] for f in ds.frames]
    header = {
        "kind": "split", "schema_version": SPLIT_SCHEMA_VERSION, "split": name, "T": ds.T,
        "video_ids": ds.video_ids, "classes": list(classes), "vocabulary": vocabulary,
    }
    dim = ds.frames[0].shape[1] if ds.frames else 0
    arrays = [
        ("frames", np.concatenate(ds.frames) if ds.frames else np.zeros((0, dim))),
        ("offsets", np.r_[0, np.cumsum(lengths)].astype(np.int64)),
        ("video_index", ds.video_index),
        ("end_frames", ds.end_frames),
        ("labels", ds.labels),
        ("ground_truth", np.array([code[str(x)] for v in videos for x in v.labels], dtype=np.int64)),
    ]
    write_container(path, header, arrays)


def load_split(path: Path) -> tuple[WindowedDataset, dict[str, np.ndarray], dict]:
    header, arrays = read_container(path)
    if header.get("kind") != "split" or header.get("schema_version") != SPLIT_SCHEMA_VERSION:
        raise MSGLError(f"{path}: not a version-{SPLIT_SCHEMA_VERSION} split file")
    off = arrays["offsets"]
    frames = [arrays["frames"][off[i]:off[i + 1]] for i in range(len(off) - 1)]
    vocab = np.array(header["vocabulary"], dtype=str)
    gt = {
        vid: vocab[arrays["ground_truth"][off[i]:off[i + 1]]] for i, vid in enumerate(header["video_ids"])
    }
    ds = WindowedDataset(header["video_ids"], frames, arrays["video_index"], arrays["end_frames"],
                         arrays["labels"], header["T"])
    return ds, gt, header


# --------------------------------------------------------------------- commands

def cmd_prepare(settings: dict) -> int:
    out: Path = settings["out"]
    if settings["dataset"] == "ratsi":
        manifest = load_ratsi(settings["root"])
        test_manifest = None
        checks = [(manifest, "ratsi")]
    else:
        manifest, test_manifest = load_calms21(settings["root"])
        checks = [(manifest, "calms21_train"), (test_manifest, "calms21_test")]
    if settings["validate_counts"]:
        failed = False
        for m, ref in checks:
            report = validate_manifest(m, reference_counts(ref))
            for line in report.lines():
                print(f"count mismatch [{ref}] {line}", file=sys.stderr)
            failed |= not report.ok
        if failed:
            return 1
    sets = resolve_split(settings, manifest, test_manifest)
    sources = {"train": manifest, "val": manifest, "test": test_manifest or manifest}
    videos = {k: [sources[k].video(v) for v in ids] for k, ids in sets.items()}
    pre = Preprocessor.fit(videos["train"], manifest.kept_classes)
    out.mkdir(parents=True, exist_ok=True)
    (out / "splits").mkdir(exist_ok=True)
    persist_artifacts(pre.imputer, pre.scaler, pre.label_map, out / "artifacts.json")
    T = settings["window"]
    drop = bool(settings["evaluation"].get("drop_final_window", False))
    summary = {"dataset": settings["dataset"], "window": T, "classes": pre.label_map.classes, "splits": {}}
    for name, vids in videos.items():
        ds = pre.windows(vids, T, drop_final_window=drop and name == "test")
        save_split(out / "splits" / f"{name}.split", name, ds, vids, pre.label_map.classes)
        summary["splits"][name] = {"videos": sets[name], "windows": len(ds),
                                   "class_windows": np.bincount(ds.labels, minlength=len(pre.label_map)).tolist()}
        print(f"{name:5s} {len(sets[name]):3d} video(s) {len(ds):8d} windows  {', '.join(sets[name][:4])}"
              f"{' ...' if len(sets[name]) > 4 else ''}")
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    return 0


def _load_prepared(out: Path, names: Sequence[str]):
    try:
        pre = load_artifacts(out / "artifacts.json")
        splits = {n: load_split(out / "splits" / f"{n}.split") for n in names}
    except MSGLError as exc:
        raise MSGLError(f"{exc} (run 'msgl prepare' first)") from exc
    return pre, splits


def _model_config(settings: dict, T: int, D: int, C: int) -> ModelConfig:
    fields = dict(settings["model"])
    fields.update(T=T, D=D, C=C)
    return ModelConfig(**fields).with_variant(settings["variant"])


def cmd_train(settings: dict) -> int:
    out: Path = settings["out"]
    pre, splits = _load_prepared(out, ["train", "val"])
    train_ds, val_ds = splits["train"][0], splits["val"][0]
    cfg = _model_config(settings, train_ds.T, train_ds.dim, len(pre.label_map))
    tdoc = dict(settings["train"])
    tdoc["seed"] = settings["seed"]
    tcfg = TrainConfig.from_dict(tdoc)
    print(f"variant {cfg.variant}: {count_params(cfg):,} parameters, "
          f"{len(train_ds)} train / {len(val_ds)} val windows")
    _, log = fit(cfg, train_ds, val_ds, tcfg, out_dir=out)
    best = min(log.rows, key=lambda r: r["val_loss"])
    print(f"{len(log)} epochs; best epoch {best['epoch']} val_loss {best['val_loss']:.5f} "
          f"val_acc {best['val_acc']:.4f}")
    return 0


def cmd_evaluate(settings: dict, checkpoint: Optional[str], boundary: bool) -> int:
    out: Path = settings["out"]
    pre, splits = _load_prepared(out, ["test"])
    ds, gt, header = splits["test"]
    params, cfg = load_checkpoint(checkpoint or out / "best.ckpt")
    classes = pre.label_map.classes
    for field_name, have, want in (("T", cfg.T, ds.T), ("D", cfg.D, ds.dim), ("C", cfg.C, len(classes))):
        if have != want:
            print(f"checkpoint/config mismatch in {field_name}: checkpoint {have}, data {want}", file=sys.stderr)
            return 1
    chunks = [predict_proba(params, cfg, ds.gather(idx))
              for idx in np.array_split(np.arange(len(ds)), max(1, len(ds) // 4096))]
    proba = np.concatenate(chunks) if chunks else np.zeros((0, cfg.C))
    y_pred = proba.argmax(axis=1)
    cm = compute_confusion(ds.labels, y_pred, cfg.C)
    report = class_report(cm, classes)
    curves = {}
    for i, c in enumerate(classes):
        try:
            curves[c] = roc_auc(ds.labels, proba, i)
        except UsageError as exc:
            warnings.warn(str(exc), RuntimeWarning, stacklevel=1)
    bnd = boundary_analysis(gt, ds.origins, ds.labels, y_pred, classes) if boundary else None
    emit_report(out / "eval", settings["dataset"], "test", cm, report, curves, bnd)
    print(f"{len(ds)} windows  accuracy {report.accuracy:.4f}  weighted F1 {report.weighted['f1']:.4f}  "
          f"macro recall {report.macro_recall:.4f}")
    if bnd is not None:
        fmt = lambda x: "n/a" if x is None else f"{x:.3f}"  # noqa: E731
        print(f"{bnd.transitions} transitions  acc@0 {fmt(bnd.at_transition)}  "
              f"acc<=5 {fmt(bnd.near)}  acc>10 {fmt(bnd.far)}")
    return 0


def gradcheck_variant(variant: str, seed: int = 0, lanes: int = 64) -> dict[str, float]:
    cfg = ModelConfig(**GRADCHECK_DIMS).with_variant(variant)
    params = init_params(cfg, RngStream(seed))
    data = np.random.default_rng(seed)
    X = data.normal(size=(2, cfg.T, cfg.D))
    y = data.integers(0, cfg.C, size=2)

    def loss():
        return label_smoothing_ce(classify(params, cfg, X, training=False), y, 0.1)

    return check_parameter_gradients(loss, params.as_dict(), lanes=lanes)


def cmd_gradcheck(variants: Sequence[str], seed: int, fault: Optional[str]) -> int:
    failed = False
    for variant in variants:
        started = time.perf_counter()
        if fault:
            with inject_backward_fault(fault):
                errors = gradcheck_variant(variant, seed)
        else:
            errors = gradcheck_variant(variant, seed)
        worst = max(errors, key=errors.get)
        bad = sorted(n for n, e in errors.items() if not e < GRADCHECK_TOLERANCE)
        status = "PASS" if not bad else "FAIL"
        print(f"{variant:5s} max relative error {errors[worst]:.3e} (worst {worst}) "
              f"{time.perf_counter() - started:5.1f}s {status}")
        for name in bad:
            print(f"      {name}: {errors[name]:.3e}")
        failed |= bool(bad)
    return 1 if failed else 0


# --------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config, or preset:NAME")
    common.add_argument("--dataset", choices=["ratsi", "calms21"])
    common.add_argument("--data-root", help="directory holding the dataset files")
    common.add_argument("--test-video")
    common.add_argument("--val-video")
    common.add_argument("--variant", choices=list(VARIANTS))
    common.add_argument("--window", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="msgl", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("prepare", parents=[common], help="fit preprocessing and write windowed splits")
    p.add_argument("--drop-final-window", action="store_true",
                   help="drop the last window of each test video (published CalMS21 count)")
    p.add_argument("--validate-counts", action="store_true",
                   help="check per-class frame counts against the published dataset statistics")
    sub.add_parser("train", parents=[common], help="train a model variant")
    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint")
    p.add_argument("--boundary", action="store_true", help="add the transition-distance analysis")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every parameter")
    p.add_argument("--inject-fault", metavar="OP", help="scale the backward rule of OP (self-test)")
    sub.add_parser("presets", help="list packaged split presets")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "presets":
            print("\n".join(preset_names()))
            return 0
        settings = resolve(args)
        if args.command == "prepare":
            return cmd_prepare(settings)
        if args.command == "train":
            return cmd_train(settings)
        if args.command == "evaluate":
            return cmd_evaluate(settings, args.checkpoint, args.boundary)
        variants = [args.variant] if args.variant else list(VARIANTS)
        return cmd_gradcheck(variants, settings["seed"], args.inject_fault)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MSGLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
