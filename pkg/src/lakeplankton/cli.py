"""Command line entry point: ``lakeplankton <subcommand> [options]``.

Artifacts live under the configured work directory::

    manifest.json                      split
    features.csv, standardizer.json    extract
    models/mlp_seed<S>.json            train
    confidences/<member>_<split>.csv   train, predict, ensemble
    ensembles/<name>.json              ensemble
    metrics/<stem>.json, .csv          evaluate
    reports/<stem>_f1.svg              report
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .confidence import ConfidenceMatrix
from .corpus import SplitManifest, labels_from_ids, make_split, resolve, scan_corpus
from .ensemble import EnsembleSpec, apply_stack, ensemble_average, fit_stack, select_best_n
from .features import (
    CONVENTIONS,
    FEATURE_NAMES,
    Standardizer,
    extract_features,
    fit_standardizer,
    read_feature_csv,
    write_feature_csv,
)
from .imaging import NoForeground, augment, load_image, resize_pad, resize_squash
from .metrics import evaluate
from .neural import init_glorot, predict, save_model, load_model, train

log = logging.getLogger("lakeplankton")

AUG_SEP = "#aug"


class CliError(Exception):
    pass


class Artifacts:
    """Tracks files written by one subcommand; removes them all on failure."""

    def __init__(self):
        self.written: list[Path] = []

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            for p in self.written:
                try:
                    p.unlink()
                except FileNotFoundError:
                    pass
        return False

    def write(self, path, text: str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
        self.written.append(path)
        return path


# --- helpers --------------------------------------------------------------

def _work(cfg: RunConfig) -> Path:
    return Path(cfg.paths.work_dir)


def _json(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _hash_comment(cfg: RunConfig) -> str:
    return f"run_config_sha256={cfg.sha256()}"


def _base_id(row_id: str) -> str:
    return row_id.split(AUG_SEP, 1)[0]


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"{what} not found: {path} (run the producing subcommand first)")
    return path


def _load_manifest(cfg) -> SplitManifest:
    return SplitManifest.load(_require(_work(cfg) / "manifest.json", "manifest"))


# --- split ----------------------------------------------------------------

def cmd_split(cfg: RunConfig, args, out: Artifacts) -> None:
    if not cfg.paths.corpus_root:
        raise CliError("paths.corpus_root (or --root) is required")
    catalog, records = scan_corpus(cfg.paths.corpus_root, jobs=args.jobs)
    manifest = make_split(catalog, records, cfg.split.seed, cfg.split.ratios)
    manifest = dataclasses.replace(manifest, provenance=cfg.provenance())
    path = out.write(_work(cfg) / "manifest.json", manifest.to_json())
    print(f"{path}: {len(manifest.train)} train / {len(manifest.val)} val / "
          f"{len(manifest.test)} test over {len(catalog.names)} classes")


# --- extract --------------------------------------------------------------

def _prepare(image, imaging) -> np.ndarray:
    if imaging["resize"] == "squash":
        return resize_squash(image, imaging["side"])
    if imaging["resize"] == "pad":
        return resize_pad(image, imaging["side"])
    return image


def _features_job(job):
    root, sid, imaging, augment_seeds, ranges = job
    try:
        image = _prepare(load_image(resolve(root, sid)), imaging)
        rows = [(sid, extract_features(image, imaging["threshold"], imaging["scale"]).values)]
        for k, seed in enumerate(augment_seeds, start=1):
            aug = augment(image, seed=seed, ranges=ranges)
            try:
                rows.append((f"{sid}{AUG_SEP}{k}",
                             extract_features(aug, imaging["threshold"], imaging["scale"]).values))
            except NoForeground:
                pass
        return sid, rows, None
    except Exception as exc:  # reported per sample; the run continues
        return sid, [], f"{type(exc).__name__}: {exc}"


def cmd_extract(cfg: RunConfig, args, out: Artifacts) -> None:
    manifest = _load_manifest(cfg)
    if not cfg.paths.corpus_root:
        raise CliError("paths.corpus_root (or --root) is required")
    split_of = manifest.split_of()
    ids = sorted(split_of)
    im = cfg.imaging
    imaging = {"resize": im.resize, "side": im.side, "threshold": im.threshold,
               "scale": im.scale_mm_per_px}
    jobs = []
    for i, sid in enumerate(ids):
        seeds = []
        if split_of[sid] == "train" and im.augment_copies:
            seeds = [int(np.random.SeedSequence([im.augment_seed, i, k]).generate_state(1)[0])
                     for k in range(im.augment_copies)]
        jobs.append((cfg.paths.corpus_root, sid, imaging, seeds, cfg.augmentation))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_features_job, jobs, chunksize=16))
    else:
        results = [_features_job(j) for j in jobs]

    row_ids, labels, rows, skipped = [], [], [], {}
    for sid, sample_rows, err in results:
        if err:
            log.warning("skipping %s: %s", sid, err)
            skipped[sid] = err
            continue
        for rid, values in sample_rows:
            row_ids.append(rid)
            labels.append(labels_from_ids([sid])[0])
            rows.append(values)
    if not rows:
        raise CliError("no features could be extracted")
    matrix = np.vstack(rows)
    # the standardizer sees original train images only, not augmented copies
    train_rows = [i for i, rid in enumerate(row_ids) if split_of.get(rid) == "train"]
    std = fit_standardizer(matrix[train_rows], FEATURE_NAMES, split="train")

    work = _work(cfg)
    buf_path = out.write(work / "features.csv", write_feature_csv(
        None, row_ids, labels, FEATURE_NAMES, matrix, comment=_hash_comment(cfg)))
    side = std.to_dict()
    side["n_features"] = len(FEATURE_NAMES)
    side["conventions"] = CONVENTIONS
    side["scale_mm_per_px"] = im.scale_mm_per_px
    side["skipped"] = skipped
    side["provenance"] = cfg.provenance()
    out.write(work / "standardizer.json", _json(side))
    print(f"{buf_path}: {len(row_ids)} rows x {len(FEATURE_NAMES)} features "
          f"({len(skipped)} images skipped)")


# --- train / predict ------------------------------------------------------

def _load_features(cfg, path=None):
    path = Path(path) if path else _require(_work(cfg) / "features.csv", "feature matrix")
    ids, labels, names, matrix = read_feature_csv(path)
    std_path = _require(_work(cfg) / "standardizer.json", "standardizer")
    std = Standardizer.from_dict(json.loads(std_path.read_text(encoding="utf-8")))
    if tuple(names) != std.names:
        raise CliError("feature columns do not match the standardizer")
    return ids, labels, matrix, std


def _split_rows(ids, manifest: SplitManifest, split: str, with_aug: bool = False):
    split_of = manifest.split_of()
    return [i for i, rid in enumerate(ids)
            if split_of.get(_base_id(rid)) == split and (with_aug or AUG_SEP not in rid)]


def _train_job(job):
    seed, tcfg, x_tr, y_tr, x_val, y_val, n_classes, counts = job
    tcfg = dataclasses.replace(tcfg, seed=seed)
    model = init_glorot([x_tr.shape[1], *tcfg.hidden_units, n_classes], seed,
                        tcfg.activations, [tcfg.dropout] * len(tcfg.hidden_units))
    best, history = train(model, x_tr, y_tr, x_val, y_val, tcfg, class_counts=counts)
    return seed, tcfg, best, history


def cmd_train(cfg: RunConfig, args, out: Artifacts) -> None:
    manifest = _load_manifest(cfg)
    ids, labels, matrix, std = _load_features(cfg)
    classes = manifest.classes
    cidx = {c: i for i, c in enumerate(classes)}
    z = std.transform(matrix)
    y = np.array([cidx[l] for l in labels], dtype=np.int64)
    tr = _split_rows(ids, manifest, "train", with_aug=True)
    va = _split_rows(ids, manifest, "val")
    te = _split_rows(ids, manifest, "test")
    counts = np.bincount(y[_split_rows(ids, manifest, "train")], minlength=len(classes))
    jobs = [(s, cfg.training, z[tr], y[tr], z[va], y[va], len(classes), counts) for s in cfg.seeds]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_train_job, jobs))
    else:
        results = [_train_job(j) for j in jobs]

    work = _work(cfg)
    for seed, tcfg, best, history in results:
        stem = f"mlp_seed{seed}"
        text = save_model(None, best, seed=seed, config=tcfg, classes=classes,
                          feature_names=std.names, standardizer=std.to_dict(),
                          provenance={**cfg.provenance(), "history": history})
        out.write(work / "models" / f"{stem}.json", text)
        for split, rows in (("val", va), ("test", te)):
            cm = predict(best, z[rows], [ids[i] for i in rows], classes,
                         [labels[i] for i in rows], split)
            out.write(work / "confidences" / f"{stem}_{split}.csv",
                      cm.to_csv(meta={"run_config_sha256": cfg.sha256()}))
        last = history[-1]
        print(f"{stem}: {len(history)} epochs, val_loss {min(h['val_loss'] for h in history):.4f}, "
              f"last val_accuracy {last['val_accuracy']:.4f}")


def cmd_predict(cfg: RunConfig, args, out: Artifacts) -> None:
    model_path = _require(Path(args.model), "model")
    model, doc = load_model(model_path)
    std = Standardizer.from_dict(doc["standardizer"])
    ids, labels, names, matrix = read_feature_csv(
        _require(Path(args.features) if args.features else _work(cfg) / "features.csv", "feature matrix"))
    if tuple(names) != tuple(doc["feature_names"]):
        raise CliError("feature columns do not match the model")
    if args.split == "all":
        rows = [i for i, rid in enumerate(ids) if AUG_SEP not in rid]
    else:
        rows = _split_rows(ids, _load_manifest(cfg), args.split)
    cm = predict(model, std.transform(matrix[rows]), [ids[i] for i in rows], doc["classes"],
                 [labels[i] for i in rows], None if args.split == "all" else args.split)
    path = out.write(_work(cfg) / "confidences" / f"{model_path.stem}_{args.split}.csv",
                     cm.to_csv(meta={"run_config_sha256": cfg.sha256()}))
    print(f"{path}: {len(cm)} rows")


# --- ensemble -------------------------------------------------------------

def _member_file(cfg, member: str, split: str) -> Path:
    p = Path(member)
    if p.suffix == ".csv":  # explicit test-split path; sibling _val.csv expected
        return p.with_name(p.name.replace("_test.csv", f"_{split}.csv"))
    return _require(_work(cfg) / "confidences" / f"{member}_{split}.csv", f"{split} confidences")


def _member_id(member: str) -> str:
    p = Path(member)
    return p.name[: -len("_test.csv")] if p.name.endswith("_test.csv") else member


def cmd_ensemble(cfg: RunConfig, args, out: Artifacts) -> None:
    members = args.members or [f"mlp_seed{s}" for s in cfg.seeds]
    ids = [_member_id(m) for m in members]
    test = {mid: ConfidenceMatrix.from_csv(_require(_member_file(cfg, m, "test"), "confidences"))
            for mid, m in zip(ids, members)}
    opts = cfg.ensemble
    needs_val = opts.method == "stack" or opts.best_n is not None
    val = {}
    if needs_val:
        val = {mid: ConfidenceMatrix.from_csv(_require(_member_file(cfg, m, "val"), "confidences"))
               for mid, m in zip(ids, members)}
    chosen = sorted(ids)
    selection = {"kind": "all"}
    if opts.best_n is not None:
        chosen = select_best_n(val, min(opts.best_n, len(val)))
        selection = {"kind": "best_n", "n": opts.best_n, "metric": "validation macro-F1"}

    stack = None
    if opts.method == "stack":
        stack = fit_stack([val[m] for m in chosen], lam=opts.stack_lambda,
                          iterations=opts.stack_iterations, split="val")
        combined = apply_stack(stack, [test[m] for m in chosen])
    else:
        combined = ensemble_average([test[m] for m in chosen])
    name = args.name or f"ens_{opts.method}"
    spec = EnsembleSpec(chosen, opts.method, stack, selection)
    work = _work(cfg)
    out.write(work / "ensembles" / f"{name}.json", _json({**spec.to_dict(), "provenance": cfg.provenance()}))
    path = out.write(work / "confidences" / f"{name}_test.csv",
                     combined.to_csv(meta={"run_config_sha256": cfg.sha256()}))
    print(f"{path}: {opts.method} over {len(chosen)} members ({', '.join(chosen)})")


# --- evaluate / report ----------------------------------------------------

def cmd_evaluate(cfg: RunConfig, args, out: Artifacts) -> None:
    for src in args.confidences:
        cm = ConfidenceMatrix.from_csv(_require(Path(src), "confidences"))
        if cm.labels is None:
            cm = ConfidenceMatrix(cm.ids, cm.classes, cm.probs, tuple(labels_from_ids(cm.ids)), cm.split)
        k_list = [k for k in cfg.metrics.k_list if k <= cm.n_classes]
        report = evaluate(cm, k_list=k_list, exclude=cfg.metrics.exclude)
        report.provenance = {**cfg.provenance(), "source": Path(src).name}
        stem = Path(src).stem + ("_excl" if report.exclusions else "")
        metrics_dir = _work(cfg) / "metrics"
        out.write(metrics_dir / f"{stem}.json", report.to_json())
        out.write(metrics_dir / f"{stem}.csv", report.per_class_csv())
        tops = ", ".join(f"top{k} {a:.4f}" for k, (a, _) in sorted(report.top_k.items()))
        print(f"{stem}: accuracy {report.accuracy:.4f}, macro-F1 {report.macro_f1:.4f}, {tops}")


def f1_chart_svg(doc: dict, title: str) -> str:
    import io

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [c for c in doc["per_class"] if c["support"] > 0]
    rows.sort(key=lambda c: -c["support"])
    names = [c["name"] for c in rows]
    with matplotlib.rc_context({"svg.hashsalt": "lakeplankton", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(max(6, 0.3 * len(rows) + 2), 4))
        ax.bar(range(len(rows)), [c["f1"] for c in rows], color="#4477aa")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(names, rotation=90, fontsize=7)
        ax.set_ylim(0, 1)
        ax.set_ylabel("F1")
        ax.set_title(f"{title}: macro-F1 {doc['macro_f1']:.3f}, accuracy {doc['accuracy']:.3f}")
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def cmd_report(cfg: RunConfig, args, out: Artifacts) -> None:
    for src in args.metrics:
        doc = json.loads(_require(Path(src), "metrics").read_text(encoding="utf-8"))
        svg = f1_chart_svg(doc, Path(src).stem)
        svg = svg.replace("<svg ", f"<!-- {_hash_comment(cfg)} -->\n<svg ", 1)
        path = out.write(_work(cfg) / "reports" / f"{Path(src).stem}_f1.svg", svg)
        print(path)


# --- argument parsing -----------------------------------------------------

COMMANDS = {
    "split": cmd_split,
    "extract": cmd_extract,
    "train": cmd_train,
    "predict": cmd_predict,
    "ensemble": cmd_ensemble,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML run configuration")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers (default 1)")
    common.add_argument("--root", help="corpus root (overrides paths.corpus_root)")
    common.add_argument("--work-dir", help="artifact directory (overrides paths.work_dir)")
    common.add_argument("--seed", type=int, action="append",
                        help="split seed for 'split', training seed(s) otherwise; repeatable")
    common.add_argument("--resize", choices=["none", "squash", "pad"])
    common.add_argument("--side", type=int)
    common.add_argument("--scale-mm-per-px", type=float)
    common.add_argument("--class-weighting", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--method", choices=["average", "stack"])
    common.add_argument("--best-n", type=int)
    common.add_argument("--top-k", help="comma-separated k values, e.g. 1,2,3")
    common.add_argument("--exclude", help="comma-separated class names to leave out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lakeplankton", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("split", parents=[common], help="write a stratified split manifest")
    sub.add_parser("extract", parents=[common], help="compute features and fit the standardizer")
    sub.add_parser("train", parents=[common], help="train one MLP per seed")
    p = sub.add_parser("predict", parents=[common], help="confidences of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--features", help="feature CSV (default: work-dir features.csv)")
    p = sub.add_parser("ensemble", parents=[common], help="average or stack member confidences")
    p.add_argument("--members", nargs="+",
                   help="member ids under confidences/ or paths to *_test.csv files")
    p.add_argument("--name", help="ensemble name (default ens_<method>)")
    p = sub.add_parser("evaluate", parents=[common], help="metrics of confidence CSVs")
    p.add_argument("--confidences", nargs="+", required=True)
    p = sub.add_parser("report", parents=[common], help="per-class F1 bar chart (SVG)")
    p.add_argument("--metrics", nargs="+", required=True)
    return parser


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.root:
        cfg.paths.corpus_root = args.root
    if args.work_dir:
        cfg.paths.work_dir = args.work_dir
    if args.seed:
        if args.command == "split":
            cfg.split.seed = args.seed[0]
        else:
            cfg.seeds = tuple(args.seed)
    if args.resize:
        cfg.imaging.resize = args.resize
    if args.side is not None:
        cfg.imaging.side = args.side
    if args.scale_mm_per_px is not None:
        cfg.imaging.scale_mm_per_px = args.scale_mm_per_px
    if args.class_weighting is not None:
        cfg.training = dataclasses.replace(cfg.training, class_weighting=args.class_weighting)
    if args.method:
        cfg.ensemble.method = args.method
    if args.best_n is not None:
        cfg.ensemble.best_n = args.best_n
    if args.top_k:
        cfg.metrics.k_list = tuple(int(k) for k in _csv_list(args.top_k))
    if args.exclude is not None:
        cfg.metrics.exclude = tuple(_csv_list(args.exclude))
    return cfg.validate()


def _module_of(exc: BaseException) -> str:
    """Package module that raised ``exc`` (deepest frame wins)."""
    name = "cli"
    tb = exc.__traceback__
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("lakeplankton."):
            name = mod.split(".", 1)[1]
        tb = tb.tb_next
    return name


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        cfg = resolve_config(args)
        with Artifacts() as out:
            COMMANDS[args.command](cfg, args, out)
    except (ConfigError, CliError, ValueError, OSError, KeyError) as exc:
        print(f"{_module_of(exc)}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
