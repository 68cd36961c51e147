"""Command-line front end: one subcommand per pipeline stage.

Every stage reads its inputs from, and writes its outputs into, a working
directory::

    tree.json  layout.tsv  layout.json  expr.tsv  images/<sample>.omnt
    model.omck  metrics/*.csv  metrics/*.svg  attribution.tsv  enrichment.tsv

Settings come from flags, then an optional ``key = value`` config file, then
built-in defaults.  Exit status is 0 on success, 1 on data/domain errors and
2 on usage errors.
"""

import argparse
import csv
import sys
from dataclasses import dataclass, fields
from itertools import combinations
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import cnn, expr, hierarchy, render, treemap
from ._io import atomic_open, sub_seed
from .attribution import attribute, export_report, import_report, top_selected
from .errors import OmicsMapError, UnknownCategory
from .estimators import OmicsMapNetClassifier
from .evaluation import (
    enrich_hypergeom, permutation_control, ranksum_test, roc_svg, run_cv, select_C,
    write_enrichment, write_fold_metrics, write_roc_points, write_summary,
)

PROG = "omicsmap"


class UsageError(Exception):
    """Bad command line or configuration (exit status 2)."""


@dataclass
class PipelineConfig:
    workdir: str = "."
    hierarchy: str = ""
    counts: str = ""
    labels: str = ""
    mapping: str = ""
    cache_dir: str = ""
    catalog: str = "br:br08902"
    branch: str = "Genes and Proteins"
    loose_ids: bool = False
    filter_threshold: float = expr.FILTER_THRESHOLD
    layout_side: int = 1024
    render_divisor: int = 2
    channels: int = 1
    borders: bool = False
    image_format: str = "tensor"
    learning_rate: float = 0.001
    beta_l2: float = 0.01
    keep_prob: float = 0.75
    batch_size: int = 29
    max_epochs: int = 300
    patience: int = 10
    val_fraction: float = 0.1
    dtype: str = "float64"
    cv_k: int = 10
    attribution_frac: float = 0.1
    logreg_cs: str = "0.001,0.01,0.1,1,10"
    seed: int = 0
    jobs: int = 1
    verbose: bool = False
    # synthetic data
    n_samples: int = 200
    n_classes: int = 3
    n_categories: int = 40
    genes_per_category: int = 12
    n_planted: int = 4
    effect: float = 3.0

    def validate(self, command: str) -> None:
        if self.layout_side <= 0 or self.render_divisor <= 0:
            raise UsageError("layout-side and render-divisor must be positive")
        if self.layout_side % self.render_divisor:
            raise UsageError(f"render-divisor {self.render_divisor} does not divide layout-side {self.layout_side}")
        if command in ("cv", "permute-cv", "baseline-logreg") and self.cv_k < 2:
            raise UsageError("cv-k must be at least 2")
        if self.channels not in (1, 3):
            raise UsageError("channels must be 1 or 3")
        if self.jobs < 1:
            raise UsageError("jobs must be >= 1")
        if self.image_format not in ("tensor", "png"):
            raise UsageError("image-format must be 'tensor' or 'png'")

    # workdir paths
    def path(self, *parts) -> Path:
        return Path(self.workdir).joinpath(*parts)

    @property
    def cache(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else self.path("cache")

    def input_or_workdir(self, value: str, default_name: str) -> Path:
        return Path(value) if value else self.path(default_name)


COMMANDS = {
    "fetch-hierarchy": "download the catalog and its branch files into the cache",
    "build-tree": "build the annotation tree (tree.json)",
    "normalize": "TMM-normalize, filter and map counts (expr.tsv)",
    "layout": "compute the fixed treemap geometry (layout.tsv, layout.json)",
    "render": "render one image per sample (images/)",
    "train": "train the network on all labelled images (model.omck)",
    "predict": "class probabilities from a trained model (metrics/predictions.csv)",
    "cv": "stratified cross-validation (metrics/cv_*.csv)",
    "permute-cv": "label-permutation control (metrics/permute_*.csv)",
    "attribute": "project strong Pool3 pixels onto genes (attribution.tsv)",
    "enrich": "hypergeometric enrichment of top genes (enrichment.tsv)",
    "synth": "write a synthetic dataset with planted categories",
    "baseline-logreg": "L2 logistic-regression baseline on expr.tsv",
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="key = value settings file")
    for f in fields(PipelineConfig):
        if f.type in (bool, "bool"):
            common.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction)
        else:
            kind = {int: int, float: float}.get(f.type, str)
            common.add_argument(_flag(f.name), dest=f.name, type=kind,
                                metavar=f.name.upper(), help=f"default: {f.default!r}")

    parser = argparse.ArgumentParser(prog=PROG, description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, text in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def read_config_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None
    values = {}
    for key, value in raw.items():
        name = key.replace("-", "_")
        if name not in _TYPES:
            raise UsageError(f"{path}: unknown key {key!r}")
        kind = _TYPES[name]
        if kind is bool and not isinstance(value, bool):
            raise UsageError(f"{path}: {key} must be true or false")
        try:
            values[name] = kind(value) if kind in (int, float, str) else value
        except (TypeError, ValueError):
            raise UsageError(f"{path}: bad value for {key}: {value!r}") from None
    return values


def parse_args(argv: Optional[Sequence[str]] = None):
    """Return ``(command, PipelineConfig)``; raises ``SystemExit(2)`` on bad usage."""
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    command = ns.pop("command")
    settings = {}
    config_path = ns.pop("config", None)
    if config_path:
        settings.update(read_config_file(config_path))
    settings.update(ns)
    cfg = PipelineConfig(**settings)
    cfg.validate(command)
    return command, cfg


# ---------------------------------------------------------------------------
# stage helpers

def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise OmicsMapError(f"missing {what} file {path}; run the producing stage first")
    return path


def _ensure_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _labels(cfg) -> dict:
    return expr.load_labels(_require(cfg.input_or_workdir(cfg.labels, "labels.tsv"), "labels"))


def _load_images(cfg, labelled_only=True):
    """Stack of images for the labelled samples (sorted by id) and their labels."""
    img_dir = _require(cfg.path("images"), "images directory")
    available = {p.stem: p for p in img_dir.glob("*.omnt")}
    if not available:
        raise OmicsMapError(f"no rendered images in {img_dir}")
    if labelled_only:
        labels = _labels(cfg)
        ids = sorted(s for s in labels if s in available)
        missing = sorted(set(labels) - set(available))
        if missing:
            raise OmicsMapError(f"{len(missing)} labelled samples have no image, e.g. {missing[0]}")
        y = np.array([labels[s] for s in ids])
    else:
        ids, y = sorted(available), None
    X = np.stack([render.read_tensor(available[s]) for s in ids])
    return ids, X, y


def _classifier(cfg, random_state=None):
    return OmicsMapNetClassifier(
        learning_rate=cfg.learning_rate, beta_l2=cfg.beta_l2, keep_prob=cfg.keep_prob,
        batch_size=cfg.batch_size, max_epochs=cfg.max_epochs, patience=cfg.patience,
        val_fraction=cfg.val_fraction, dtype=cfg.dtype,
        random_state=cfg.seed if random_state is None else random_state, verbose=cfg.verbose)


def _write_cv_outputs(cfg, result, prefix):
    metrics = _ensure_dir(cfg.path("metrics"))
    write_fold_metrics(result, metrics / f"{prefix}_folds.csv")
    for cls in result.classes:
        write_roc_points(result, cls, metrics / f"{prefix}_roc_{cls}.csv")
        curves = [f.roc.get(cls, np.zeros((0, 2))) for f in result.folds]
        with atomic_open(metrics / f"{prefix}_roc_{cls}.svg") as fh:
            fh.write(roc_svg(curves, f"class {cls} vs rest"))
    write_summary({prefix: result.summary()}, metrics / f"{prefix}_summary.csv")


def _read_fold_accuracies(path: Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        return np.array([float(r["accuracy"]) for r in csv.DictReader(fh)])


def _write_comparison(cfg):
    metrics = cfg.path("metrics")
    cv_path, perm_path = metrics / "cv_folds.csv", metrics / "permute_folds.csv"
    if not (cv_path.exists() and perm_path.exists()):
        return
    a, b = _read_fold_accuracies(cv_path), _read_fold_accuracies(perm_path)
    with atomic_open(metrics / "comparison.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cv_mean", "permute_mean", "ranksum_p"])
        w.writerow([f"{a.mean():.6f}", f"{b.mean():.6f}", f"{ranksum_test(a, b):.6g}"])


# ---------------------------------------------------------------------------
# stages

def cmd_fetch_hierarchy(cfg):
    top = cfg.catalog
    payload = hierarchy.fetch_catalog(top, cfg.cache)
    tree = hierarchy.parse_htext(payload, loose_ids=cfg.loose_ids)
    branch = hierarchy.find_node(tree, cfg.branch)
    if branch is None:
        raise UnknownCategory(f"branch {cfg.branch!r} not in {top}")
    n = 1
    for node in branch.iter_nodes():
        if node is not branch and not node.children:
            hierarchy.fetch_catalog("br:" + node.label.split()[0], cfg.cache)
            n += 1
    print(f"{n} catalog files cached in {cfg.cache}")


def _sub_files(cfg, top_tree):
    branch = hierarchy.find_node(top_tree, cfg.branch)
    if branch is None:
        raise UnknownCategory(f"branch {cfg.branch!r} not in catalog")
    subs = {}
    for node in branch.iter_nodes():
        if node is branch or node.children:
            continue
        key = node.label.split()[0]
        path = hierarchy.cache_path("br:" + key, cfg.cache)
        if path.exists():
            subs[key] = hierarchy.parse_htext(path.read_bytes(), loose_ids=cfg.loose_ids)
    return subs


def cmd_build_tree(cfg):
    """A catalog with ``branch`` is grafted with cached sub-files; any other file is the tree."""
    if cfg.hierarchy:
        src = _require(Path(cfg.hierarchy), "hierarchy")
    elif cfg.path("hierarchy.keg").exists():
        src = cfg.path("hierarchy.keg")
    else:
        src = _require(hierarchy.cache_path(cfg.catalog, cfg.cache), "hierarchy")
    top = hierarchy.load_tree(src, loose_ids=cfg.loose_ids)
    if hierarchy.find_node(top, cfg.branch) is not None:
        tree = hierarchy.build_annotation_tree(top, cfg.branch, _sub_files(cfg, top))
    else:
        tree = hierarchy.truncate(top)
    with atomic_open(cfg.path("tree.json")) as fh:
        fh.write(hierarchy.dumps_tree(tree))
    print(f"tree: {tree.n_nodes()} nodes, {tree.n_leaves()} gene leaves")


def cmd_normalize(cfg):
    counts = expr.load_counts(_require(cfg.input_or_workdir(cfg.counts, "counts.tsv"), "counts"))
    e = expr.tmm_normalize(counts)
    mapping_path = cfg.input_or_workdir(cfg.mapping, "mapping.tsv")
    if cfg.mapping or mapping_path.exists():
        e = expr.map_to_kegg(e, expr.load_mapping(_require(mapping_path, "mapping")))
    e = expr.filter_low_expression(e, cfg.filter_threshold)
    expr.write_expression(e, cfg.path("expr.tsv"))
    print(f"expr.tsv: {len(e.gene_ids)} genes x {len(e.sample_ids)} samples")


def cmd_layout(cfg):
    tree = hierarchy.load_tree(_require(cfg.path("tree.json"), "tree"))
    e = expr.load_expression(_require(cfg.path("expr.tsv"), "expression"))
    medians = dict(zip(e.gene_ids, np.median(e.values, axis=1)))
    attached = hierarchy.attach_genes(tree, set(e.gene_ids))
    if not attached.n_leaves():
        raise OmicsMapError("no expressed gene is annotated in the tree")
    layout = treemap.build_layout(attached, medians, float(cfg.layout_side))
    treemap.export_structure(layout, cfg.path("layout.tsv"))
    treemap.save_layout(layout, cfg.path("layout.json"))
    print(f"layout: {len(layout.entries)} gene copies, worst aspect {layout.worst_aspect_ratio():.2f}")


def cmd_render(cfg):
    layout = treemap.load_layout(_require(cfg.path("layout.json"), "layout"))
    e = expr.load_expression(_require(cfg.path("expr.tsv"), "expression"))
    side = int(round(layout.side))
    if side % cfg.render_divisor:
        raise OmicsMapError(f"render divisor {cfg.render_divisor} does not divide layout side {side}")
    # tensors stay border-free for exact attribution; PNGs for viewing get borders
    index = render.leaf_index_map(layout, side, cfg.borders or cfg.image_format == "png")
    row = {g: i for i, g in enumerate(e.gene_ids)}
    missing = [x.kegg_id for x in layout.entries if x.kegg_id not in row]
    if missing:
        raise OmicsMapError(f"layout gene {missing[0]} is absent from expr.tsv")
    cols = np.array([row[x.kegg_id] for x in layout.entries], dtype=np.intp)
    out = _ensure_dir(cfg.path("images"))
    suffix = "omnt" if cfg.image_format == "tensor" else "png"
    for start in range(0, len(e.sample_ids), 16):
        block = e.values[cols, start:start + 16].T
        imgs = render.downsample_mean(render.paint(index, render.scale_unit(block), cfg.channels),
                                      cfg.render_divisor)
        for sid, img in zip(e.sample_ids[start:start + 16], imgs):
            render.export_image(img, out / f"{sid}.{suffix}", cfg.image_format)
    print(f"rendered {len(e.sample_ids)} images of side {side // cfg.render_divisor}")


def cmd_train(cfg):
    _, X, y = _load_images(cfg)
    clf = _classifier(cfg, sub_seed(cfg.seed, "train")).fit(X, y)
    cnn.checkpoint_save(clf.model_, clf.optimizer_state_, cfg.path("model.omck"))
    metrics = _ensure_dir(cfg.path("metrics"))
    with atomic_open(metrics / "train_history.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
        for h in clf.history_:
            w.writerow([h["epoch"], f"{h['train_loss']:.6f}", f"{h['val_loss']:.6f}", f"{h['val_accuracy']:.6f}"])
    with atomic_open(metrics / "classes.csv") as fh:
        fh.write("index,class\n" + "".join(f"{i},{c}\n" for i, c in enumerate(clf.classes_)))
    print(f"trained {clf.n_epochs_} epochs; model.omck written")


def _load_model(cfg):
    model, _ = cnn.checkpoint_load(_require(cfg.path("model.omck"), "model"))
    classes_path = cfg.path("metrics", "classes.csv")
    if classes_path.exists():
        with open(classes_path, newline="", encoding="utf-8") as fh:
            classes = [r["class"] for r in csv.DictReader(fh)]
    else:
        classes = [str(i) for i in range(model.n_classes)]
    return model, classes


def cmd_predict(cfg):
    model, classes = _load_model(cfg)
    ids, X, _ = _load_images(cfg, labelled_only=False)
    probs = cnn.predict(model, X.astype(model.dtype, copy=False))
    with atomic_open(_ensure_dir(cfg.path("metrics")) / "predictions.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "predicted"] + [f"p_{c}" for c in classes])
        for sid, p in zip(ids, probs):
            w.writerow([sid, classes[int(np.argmax(p))]] + [f"{v:.6f}" for v in p])
    print(f"predicted {len(ids)} samples")


def cmd_cv(cfg):
    _, X, y = _load_images(cfg)
    result = run_cv(X, y, _classifier(cfg), cfg.cv_k, sub_seed(cfg.seed, "cv"), cfg.jobs)
    _write_cv_outputs(cfg, result, "cv")
    _write_comparison(cfg)
    s = result.summary()
    print(f"cv accuracy mean {s['mean']:.4f} (95% CI {s['ci_low']:.4f}-{s['ci_high']:.4f})")


def cmd_permute_cv(cfg):
    _, X, y = _load_images(cfg)
    result = permutation_control(X, y, _classifier(cfg), cfg.cv_k, sub_seed(cfg.seed, "cv"), cfg.jobs)
    _write_cv_outputs(cfg, result, "permute")
    _write_comparison(cfg)
    print(f"permuted-label accuracy mean {result.summary()['mean']:.4f}")


def cmd_attribute(cfg):
    model, _ = _load_model(cfg)
    layout = treemap.load_layout(_require(cfg.path("layout.json"), "layout"))
    _, X, _ = _load_images(cfg, labelled_only=False)
    maps = cnn.pool3_maps(model, X.astype(model.dtype, copy=False))
    rows = attribute(maps, layout, cfg.attribution_frac)
    export_report(rows, cfg.path("attribution.tsv"))
    print(f"attribution.tsv: {len(rows)} gene copies over {len(X)} samples")


def copy_groups(rows, level=hierarchy.CATEGORY_DEPTH):
    """Level-``level`` category label -> set of (kegg_id, copy_index) items."""
    groups = {}
    for r in rows:
        if len(r.annotation_path) > level:
            groups.setdefault(r.annotation_path[level], set()).add((r.kegg_id, r.copy_index))
    return groups


def cmd_enrich(cfg):
    rows = import_report(_require(cfg.path("attribution.tsv"), "attribution"))
    selected = {(r.kegg_id, r.copy_index) for r in top_selected(rows, cfg.attribution_frac)}
    background = {(r.kegg_id, r.copy_index) for r in rows}
    result = enrich_hypergeom(selected, background, copy_groups(rows))
    write_enrichment(result, cfg.path("enrichment.tsv"))
    print(f"enrichment.tsv: {len(result)} categories tested, {len(selected)} copies selected")


def cmd_synth(cfg):
    rng_seed = sub_seed(cfg.seed, "synth")
    tree = expr.synthetic_tree(cfg.n_categories, cfg.genes_per_category, seed=rng_seed)
    classes = [f"C{i + 1}" for i in range(cfg.n_classes)]
    labels = sorted({n.label for n in tree.iter_nodes() if n.level == hierarchy.CATEGORY_DEPTH})
    pick = np.random.default_rng(sub_seed(cfg.seed, "plant")).choice(len(labels), cfg.n_planted, replace=False)
    planted = {}
    for i, k in enumerate(sorted(int(k) for k in pick)):
        planted.setdefault(classes[i % len(classes)], []).append(labels[k])
    counts, sample_labels, _ = expr.generate_synthetic(cfg.n_samples, classes, tree, planted,
                                                       cfg.effect, sub_seed(cfg.seed, "counts"))
    # raw rows carry their own gene ids, mapped back to KEGG ids by mapping.tsv
    raw_ids = [f"gene{i + 1:05d}" for i in range(len(counts.gene_ids))]
    expr.write_counts(expr.CountMatrix(raw_ids, counts.sample_ids, counts.counts), cfg.path("counts.tsv"))
    with atomic_open(cfg.path("mapping.tsv")) as fh:
        fh.write("gene_id\tkegg_id\n" + "".join(f"{a}\t{b}\n" for a, b in zip(raw_ids, counts.gene_ids)))
    expr.write_labels(sample_labels, cfg.path("labels.tsv"))
    with atomic_open(cfg.path("hierarchy.keg")) as fh:
        fh.write(hierarchy.to_htext(tree))
    with atomic_open(cfg.path("planted.tsv")) as fh:
        fh.write("class\tcategory\n" + "".join(f"{c}\t{lab}\n" for c in classes for lab in planted.get(c, [])))
    print(f"synthetic dataset: {cfg.n_samples} samples, {len(raw_ids)} genes, "
          f"{cfg.n_planted} planted categories")


def cmd_baseline_logreg(cfg):
    e = expr.load_expression(_require(cfg.path("expr.tsv"), "expression"))
    labels = _labels(cfg)
    cols = [i for i, s in enumerate(e.sample_ids) if s in labels]
    X = e.values[:, cols].T
    y = np.array([labels[e.sample_ids[i]] for i in cols])
    grid = [float(c) for c in cfg.logreg_cs.split(",") if c.strip()]
    with atomic_open(_ensure_dir(cfg.path("metrics")) / "logreg.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["positive", "negative", "C", "fold", "auc"])
        for neg, pos in combinations(sorted(set(y.tolist())), 2):
            mask = np.isin(y, [neg, pos])
            yy = np.where(y[mask] == pos, 1, -1)
            C, aucs = select_C(X[mask], yy, grid, cfg.cv_k, sub_seed(cfg.seed, "logreg"))
            for i, a in enumerate(aucs):
                w.writerow([pos, neg, f"{C:g}", i, f"{a:.6f}"])
            print(f"{pos} vs {neg}: C={C:g} mean AUC {np.mean(aucs):.4f}")


HANDLERS = {
    "fetch-hierarchy": cmd_fetch_hierarchy, "build-tree": cmd_build_tree, "normalize": cmd_normalize,
    "layout": cmd_layout, "render": cmd_render, "train": cmd_train, "predict": cmd_predict,
    "cv": cmd_cv, "permute-cv": cmd_permute_cv, "attribute": cmd_attribute, "enrich": cmd_enrich,
    "synth": cmd_synth, "baseline-logreg": cmd_baseline_logreg,
}


def run(command: str, cfg: PipelineConfig) -> int:
    try:
        _ensure_dir(Path(cfg.workdir))
        HANDLERS[command](cfg)
    except (OmicsMapError, ValueError) as exc:
        print(f"{PROG} {command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    try:
        command, cfg = parse_args(argv)
    except UsageError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse: --help (0) or bad usage (2)
        return int(exc.code or 0)
    return run(command, cfg)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
