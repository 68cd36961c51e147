"""Count matrices: loading, TMM normalization to log2-CPM, filtering, id mapping.

Also holds the seeded synthetic generator used for desk-scale experiments.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from ._io import atomic_open
from .errors import (
    DegenerateLibrary,
    DuplicateSample,
    EmptyMatrix,
    ParseError,
    UnknownCategory,
)
from .hierarchy import GeneLeaf, HierarchyNode, HierarchyTree, relevel

LOGRATIO_TRIM = 0.3
SUM_TRIM = 0.05
PRIOR_COUNT = 0.5
FILTER_THRESHOLD = -5.0


@dataclass
class CountMatrix:
    gene_ids: List[str]
    sample_ids: List[str]
    counts: np.ndarray  # genes x samples, int64

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (len(self.gene_ids), len(self.sample_ids)):
            raise ValueError("counts shape does not match ids")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise DuplicateSample("duplicate sample ids")
        if (self.counts < 0).any():
            raise ParseError("negative counts")


@dataclass
class ExpressionMatrix:
    gene_ids: List[str]
    sample_ids: List[str]
    values: np.ndarray  # genes x samples, log2 abundances
    norm_factors: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.norm_factors is None:
            self.norm_factors = np.ones(len(self.sample_ids))
        self.norm_factors = np.asarray(self.norm_factors, dtype=np.float64)

    def subset_genes(self, mask_or_index) -> "ExpressionMatrix":
        idx = np.arange(len(self.gene_ids))[mask_or_index]
        return ExpressionMatrix([self.gene_ids[i] for i in idx], list(self.sample_ids),
                                self.values[idx], self.norm_factors.copy())

    def row(self, gene_id: str) -> np.ndarray:
        return self.values[self.gene_ids.index(gene_id)]

    def to_frame(self):
        """Samples x genes DataFrame (the orientation estimators expect)."""
        import pandas as pd

        return pd.DataFrame(self.values.T, index=self.sample_ids, columns=self.gene_ids)


# ---------------------------------------------------------------------------
# IO

def _read_tsv_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [row for row in csv.reader(fh, delimiter="\t") if row and any(c.strip() for c in row)]


def load_counts(path) -> CountMatrix:
    rows = _read_tsv_rows(path)
    if len(rows) < 2 or len(rows[0]) < 2:
        raise EmptyMatrix(f"{path}: no genes or no samples")
    sample_ids = rows[0][1:]
    if len(set(sample_ids)) != len(sample_ids):
        raise DuplicateSample(f"{path}: duplicate sample id in header")
    gene_ids, data = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(sample_ids) + 1:
            raise ParseError(f"{path}:{lineno}: expected {len(sample_ids) + 1} fields, got {len(row)}")
        try:
            vals = [int(cell) for cell in row[1:]]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-integer count") from None
        if min(vals) < 0:
            raise ParseError(f"{path}:{lineno}: negative count")
        gene_ids.append(row[0])
        data.append(vals)
    return CountMatrix(gene_ids, sample_ids, np.array(data, dtype=np.int64))


def write_counts(counts: CountMatrix, path) -> None:
    with atomic_open(path) as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["gene_id"] + list(counts.sample_ids))
        for gid, row in zip(counts.gene_ids, counts.counts):
            w.writerow([gid] + [str(int(v)) for v in row])


def write_expression(expr: ExpressionMatrix, path) -> None:
    """Write log2 values with full round-trip precision.

    A ``#norm_factors`` comment line carries the per-sample factors.
    """
    with atomic_open(path) as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["#norm_factors"] + [repr(float(f)) for f in expr.norm_factors])
        w.writerow(["gene_id"] + list(expr.sample_ids))
        for gid, row in zip(expr.gene_ids, expr.values):
            w.writerow([gid] + [repr(float(v)) for v in row])


def load_expression(path) -> ExpressionMatrix:
    rows = _read_tsv_rows(path)
    factors = None
    if rows and rows[0][0] == "#norm_factors":
        factors = np.array([float(v) for v in rows[0][1:]])
        rows = rows[1:]
    if len(rows) < 2:
        raise EmptyMatrix(f"{path}: empty expression matrix")
    sample_ids = rows[0][1:]
    try:
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    except ValueError:
        raise ParseError(f"{path}: non-numeric value") from None
    return ExpressionMatrix([r[0] for r in rows[1:]], sample_ids, values, factors)


def load_labels(path) -> Dict[str, str]:
    """``sample_id<TAB>class`` per line; a ``sample_id`` header line is skipped."""
    labels = {}
    for row in _read_tsv_rows(path):
        if len(row) < 2:
            raise ParseError(f"{path}: label line needs two fields: {row!r}")
        if row[0] == "sample_id" and not labels:
            continue
        labels[row[0]] = row[1]
    return labels


def write_labels(labels: Mapping[str, str], path) -> None:
    with atomic_open(path) as fh:
        fh.write("sample_id\tclass\n")
        for sid, cls in labels.items():
            fh.write(f"{sid}\t{cls}\n")


def load_mapping(path) -> Dict[str, str]:
    mapping = {}
    for row in _read_tsv_rows(path):
        if len(row) < 2:
            raise ParseError(f"{path}: mapping line needs two fields: {row!r}")
        if row[0] == "gene_id" and not mapping:
            continue
        mapping[row[0]] = row[1]
    return mapping


# ---------------------------------------------------------------------------
# normalization

def _tmm_factor(obs, ref, logratio_trim=LOGRATIO_TRIM, sum_trim=SUM_TRIM):
    obs = obs.astype(np.float64)
    ref = ref.astype(np.float64)
    n_obs, n_ref = obs.sum(), ref.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        log_r = np.log2((obs / n_obs) / (ref / n_ref))
        abs_e = (np.log2(obs / n_obs) + np.log2(ref / n_ref)) / 2
        var = (n_obs - obs) / n_obs / obs + (n_ref - ref) / n_ref / ref
    fin = np.isfinite(log_r) & np.isfinite(abs_e)
    log_r, abs_e, var = log_r[fin], abs_e[fin], var[fin]
    if log_r.size == 0 or np.max(np.abs(log_r)) < 1e-6:
        return 1.0

    n = log_r.size
    lo_l = np.floor(n * logratio_trim) + 1
    hi_l = n + 1 - lo_l
    lo_s = np.floor(n * sum_trim) + 1
    hi_s = n + 1 - lo_s
    r_l = rankdata(log_r)
    r_s = rankdata(abs_e)
    keep = (r_l >= lo_l) & (r_l <= hi_l) & (r_s >= lo_s) & (r_s <= hi_s)
    if not keep.any():
        return 1.0
    f = np.sum(log_r[keep] / var[keep]) / np.sum(1.0 / var[keep])
    if not np.isfinite(f):
        f = 0.0
    return float(2.0 ** f)


def tmm_factors(counts: np.ndarray, logratio_trim: float = LOGRATIO_TRIM,
                sum_trim: float = SUM_TRIM) -> np.ndarray:
    """Trimmed-mean-of-M-values normalization factors, geometric mean 1."""
    counts = np.asarray(counts)
    lib = counts.sum(axis=0).astype(np.float64)
    if (lib <= 0).any():
        bad = int(np.flatnonzero(lib <= 0)[0])
        raise DegenerateLibrary(f"sample {bad} has an all-zero library")
    counts = counts[counts.sum(axis=1) > 0]
    if counts.shape[1] < 2:
        return np.ones(counts.shape[1])
    upper = np.quantile(counts, 0.75, axis=0) / lib
    ref_col = int(np.argmin(np.abs(upper - upper.mean())))
    factors = np.array([
        _tmm_factor(counts[:, j], counts[:, ref_col], logratio_trim, sum_trim)
        for j in range(counts.shape[1])
    ])
    return factors / np.exp(np.mean(np.log(factors)))


def log2_cpm(counts: np.ndarray, factors: np.ndarray, prior: float = PRIOR_COUNT) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    eff_lib = counts.sum(axis=0) * factors
    return np.log2(counts * 1e6 / eff_lib + prior)


def tmm_normalize(counts: CountMatrix) -> ExpressionMatrix:
    """TMM factors plus log2(CPM + 0.5) on the effective library sizes."""
    if counts.counts.size == 0:
        raise EmptyMatrix("no counts to normalize")
    factors = tmm_factors(counts.counts)
    values = log2_cpm(counts.counts, factors)
    return ExpressionMatrix(list(counts.gene_ids), list(counts.sample_ids), values, factors)


def filter_low_expression(expr: ExpressionMatrix, threshold: float = FILTER_THRESHOLD) -> ExpressionMatrix:
    """Keep genes whose largest value across samples exceeds ``threshold``."""
    if expr.values.shape[1] == 0:
        return expr.subset_genes(slice(None))
    keep = expr.values.max(axis=1) > threshold
    return expr.subset_genes(keep)


def map_to_kegg(expr: ExpressionMatrix, mapping: Mapping[str, str]) -> ExpressionMatrix:
    """Re-key rows by KEGG id; on collisions keep the row with the highest mean.

    Equal means go to the lexicographically smaller source gene id.  Rows come
    out in order of first appearance of each KEGG id.
    """
    means = expr.values.mean(axis=1) if expr.values.shape[1] else np.zeros(len(expr.gene_ids))
    best: Dict[str, int] = {}
    for i, gid in enumerate(expr.gene_ids):
        kid = mapping.get(gid)
        if kid is None:
            continue
        j = best.get(kid)
        if j is None:
            best[kid] = i
        elif means[i] > means[j] or (means[i] == means[j] and gid < expr.gene_ids[j]):
            best[kid] = i
    kegg_ids = list(best)
    rows = [best[k] for k in kegg_ids]
    values = expr.values[rows] if rows else np.zeros((0, len(expr.sample_ids)))
    return ExpressionMatrix(kegg_ids, list(expr.sample_ids), values, expr.norm_factors.copy())


# ---------------------------------------------------------------------------
# synthetic data

def synthetic_tree(n_categories: int = 40, genes_per_category: int = 12,
                   n_top: int = 4, files_per_top: int = 2, shared_fraction: float = 0.05,
                   seed: int = 0) -> HierarchyTree:
    """Random five-layer tree shaped like the annotation tree.

    Category sizes vary by +-2 around ``genes_per_category``; a fraction of
    genes is also annotated under a second category.
    """
    rng = np.random.default_rng(seed)
    root = HierarchyNode("root", 0)
    files = []
    for a in range(n_top):
        top = HierarchyNode(f"Group {a + 1}", 1)
        root.children.append(top)
        for b in range(files_per_top):
            f = HierarchyNode(f"ko{a + 1}{b + 1:03d} File {a + 1}.{b + 1}", 2)
            top.children.append(f)
            files.append(f)
    cats = []
    for c in range(n_categories):
        node = HierarchyNode(f"Category {c + 1:02d}", 3)
        files[c % len(files)].children.append(node)
        cats.append(node)

    next_id = 1
    for node in cats:
        size = max(1, genes_per_category + int(rng.integers(-2, 3)))
        for _ in range(size):
            node.genes.append(GeneLeaf(f"K{next_id:05d}", f"gene{next_id}"))
            next_id += 1
    all_genes = [(ci, g) for ci, node in enumerate(cats) for g in node.genes]
    n_shared = int(round(shared_fraction * len(all_genes)))
    for k in rng.choice(len(all_genes), size=n_shared, replace=False):
        ci, g = all_genes[int(k)]
        other = int(rng.integers(len(cats) - 1))
        other += other >= ci
        cats[other].genes.append(g)

    relevel(root)
    return root


def planted_genes(tree: HierarchyTree, categories) -> set:
    """Gene ids below any of the named categories."""
    genes = set()
    for label in categories:
        hits = [n for n in tree.iter_nodes() if n.label == label and n.level > 0]
        if not hits:
            raise UnknownCategory(f"category {label!r} not in tree")
        for n in hits:
            genes.update(g.kegg_id for g in n.leaves())
    return genes


def generate_synthetic(n_samples: int, classes: Sequence[str], tree: HierarchyTree,
                       planted: Mapping[str, Sequence[str]], effect: float, seed: int,
                       base_range=(2.0, 10.0), noise_sd: float = 0.5):
    """Seeded log-normal counts with class-specific shifts on planted categories.

    Returns ``(CountMatrix, labels, planted_gene_ids)``.  Labels are balanced
    (sizes differ by at most one) and shuffled.
    """
    classes = list(classes)
    per_class = {c: planted_genes(tree, planted.get(c, ())) for c in classes}
    for c in planted:
        if c not in classes:
            raise UnknownCategory(f"planted class {c!r} is not one of {classes}")

    rng = np.random.default_rng(seed)
    gene_ids = list(dict.fromkeys(g.kegg_id for g in tree.leaves()))
    base = rng.uniform(base_range[0], base_range[1], size=len(gene_ids))
    y = np.array([classes[i % len(classes)] for i in range(n_samples)], dtype=object)
    y = y[rng.permutation(n_samples)]
    noise = rng.normal(0.0, noise_sd, size=(len(gene_ids), n_samples))

    shift = np.zeros((len(gene_ids), n_samples))
    index = {g: i for i, g in enumerate(gene_ids)}
    for c, genes in per_class.items():
        rows = [index[g] for g in sorted(genes)]
        cols = np.flatnonzero(y == c)
        if rows and cols.size:
            shift[np.ix_(rows, cols)] = effect
    counts = np.rint(2.0 ** (base[:, None] + shift + noise)).astype(np.int64)

    sample_ids = [f"S{i + 1:04d}" for i in range(n_samples)]
    labels = dict(zip(sample_ids, (str(v) for v in y)))
    planted_all = set().union(*per_class.values()) if per_class else set()
    return CountMatrix(gene_ids, sample_ids, counts), labels, planted_all
