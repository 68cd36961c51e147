"""Cross-validation harness, ROC/AUC, rank-sum test, logistic baseline, enrichment."""

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from scipy.stats import hypergeom, norm, rankdata
from sklearn.base import clone

from ._io import atomic_open, sub_seed
from .errors import ClassTooSmall, NonFiniteFeature, OneClassOnly, SelectionNotInBackground

Z_95 = 1.96
EXACT_RANKSUM_MAX_N = 24


# ---------------------------------------------------------------------------
# folds

def stratified_kfold(labels: Sequence, k: int, seed: int = 0) -> List[np.ndarray]:
    """Disjoint test folds; each class is shuffled and dealt round-robin.

    Dealing continues where the previous class stopped, so overall fold sizes
    stay balanced too.  Returns sorted index arrays.
    """
    y = np.asarray(labels)
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    folds: List[List[int]] = [[] for _ in range(k)]
    pos = 0
    for cls in sorted(set(y.tolist()), key=str):
        members = np.flatnonzero(y == cls)
        if len(members) < k:
            raise ClassTooSmall(f"class {cls!r} has {len(members)} samples, fewer than {k} folds")
        for idx in rng.permutation(members):
            folds[pos % k].append(int(idx))
            pos += 1
    return [np.array(sorted(f), dtype=np.intp) for f in folds]


def stratified_holdout(labels: Sequence, fraction: float, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Split indices into (fit, held-out) with ~``fraction`` of every class held out.

    Every class keeps at least one sample on the fit side; classes with two or
    more members contribute at least one held-out sample.
    """
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    held = []
    for cls in sorted(set(y.tolist()), key=str):
        members = rng.permutation(np.flatnonzero(y == cls))
        n_out = int(round(fraction * len(members)))
        n_out = min(max(n_out, 1 if len(members) > 1 else 0), len(members) - 1)
        held.extend(members[:n_out].tolist())
    held = np.array(sorted(held), dtype=np.intp)
    fit = np.setdiff1d(np.arange(len(y)), held)
    return fit, held


# ---------------------------------------------------------------------------
# ROC / AUC

def roc_auc(scores: Sequence[float], labels: Sequence) -> Tuple[np.ndarray, float]:
    """ROC points (fpr, tpr) at every distinct score threshold, and the AUC.

    AUC is the fraction of (positive, negative) pairs ordered correctly, ties
    counting one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    yb = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(yb.sum()), int((~yb).sum())
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], yb[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s) - 1]
    tps = np.cumsum(y_sorted)[last_of_run]
    fps = np.cumsum(~y_sorted)[last_of_run]
    points = np.column_stack([np.r_[0, fps] / n_neg, np.r_[0, tps] / n_pos])

    ranks = rankdata(s)
    auc = (ranks[yb].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return points, float(auc)


def trapezoid_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


# ---------------------------------------------------------------------------
# rank-sum test

def _midranks_doubled(values: np.ndarray) -> np.ndarray:
    return np.rint(2 * rankdata(values)).astype(np.int64)


def _exact_ranksum_p(r2: np.ndarray, n_a: int, w2: int) -> float:
    """P(|W - E W| >= |w - E W|) under random assignment, on doubled ranks."""
    n = len(r2)
    max_sum = int(r2.sum())
    ways = np.zeros((n_a + 1, max_sum + 1))
    ways[0, 0] = 1.0
    for r in r2:
        ways[1:, r:] += ways[:-1, :max_sum + 1 - r].copy()
    dist = ways[n_a]
    total = dist.sum()
    centre2 = n_a * (n + 1)  # E[W] in doubled-rank units
    dev = abs(w2 - centre2)
    sums = np.arange(max_sum + 1)
    extreme = np.abs(sums - centre2) >= dev
    return float(min(1.0, dist[extreme].sum() / total))


def ranksum_test(a: Sequence[float], b: Sequence[float], exact: Optional[bool] = None) -> float:
    """Two-sided Mann-Whitney / Wilcoxon rank-sum p-value.

    Exact enumeration of the rank-sum null when the pooled size is at most
    24, otherwise the normal approximation with tie and continuity
    corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    n_a, n_b, n = a.size, b.size, pooled.size
    r2 = _midranks_doubled(pooled)
    if exact is None:
        exact = n <= EXACT_RANKSUM_MAX_N
    if exact:
        return _exact_ranksum_p(r2, n_a, int(r2[:n_a].sum()))

    u = r2[:n_a].sum() / 2.0 - n_a * (n_a + 1) / 2.0
    mu = n_a * n_b / 2.0
    _, counts = np.unique(pooled, return_counts=True)
    tie = np.sum(counts ** 3 - counts) / (n * (n - 1)) if n > 1 else 0.0
    var = n_a * n_b / 12.0 * ((n + 1) - tie)
    if var <= 0:
        return 1.0
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2 * norm.sf(z)))


# ---------------------------------------------------------------------------
# cross-validation

@dataclass
class FoldMetrics:
    fold: int
    test_index: np.ndarray
    accuracy: float
    confusion: np.ndarray
    probabilities: np.ndarray
    roc: Dict[Hashable, np.ndarray] = field(default_factory=dict)
    auc: Dict[Hashable, float] = field(default_factory=dict)


@dataclass
class CVResult:
    classes: np.ndarray
    folds: List[FoldMetrics]
    estimators: List = field(default_factory=list)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([f.accuracy for f in self.folds])

    def summary(self) -> Dict[str, float]:
        return accuracy_summary(self.accuracies)

    def mean_auc(self) -> Dict[Hashable, float]:
        return {c: float(np.nanmean([f.auc.get(c, np.nan) for f in self.folds])) for c in self.classes}


def accuracy_summary(acc: Sequence[float]) -> Dict[str, float]:
    """Mean, median and the normal-approximation 95% interval of fold accuracies."""
    acc = np.asarray(acc, dtype=np.float64)
    k = acc.size
    sd = float(acc.std(ddof=1)) if k > 1 else 0.0
    half = Z_95 * sd / math.sqrt(k)
    mean = float(acc.mean())
    return {"mean": mean, "median": float(np.median(acc)), "sd": sd,
            "ci_low": mean - half, "ci_high": mean + half, "k": k}


def fold_metrics(fold: int, test_index, y_true, probs, classes) -> FoldMetrics:
    y_true = np.asarray(y_true)
    pred = classes[np.argmax(probs, axis=1)]
    conf = np.array([[np.sum((y_true == a) & (pred == b)) for b in classes] for a in classes])
    fm = FoldMetrics(fold, np.asarray(test_index), float(np.mean(pred == y_true)), conf, probs)
    for j, c in enumerate(classes):
        try:
            fm.roc[c], fm.auc[c] = roc_auc(probs[:, j], y_true == c)
        except OneClassOnly:
            fm.auc[c] = float("nan")
    return fm


def _run_fold(estimator, X, y, train_idx, test_idx, seed, fold):
    est = clone(estimator)
    if "random_state" in est.get_params():
        est.set_params(random_state=sub_seed(seed, f"fold{fold}"))
    est.fit(X[train_idx], y[train_idx])
    return est, est.predict_proba(X[test_idx])


def run_cv(X, y, estimator, k: int = 10, seed: int = 0, n_jobs: int = 1,
           keep_estimators: bool = False) -> CVResult:
    """Stratified k-fold CV of any estimator exposing ``predict_proba``."""
    y = np.asarray(y)
    classes = np.array(sorted(set(y.tolist()), key=str), dtype=y.dtype)
    folds = stratified_kfold(y, k, seed)
    jobs = []
    for i, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(len(y)), test_idx)
        jobs.append((i, train_idx, test_idx))

    if n_jobs == 1:
        fitted = [_run_fold(estimator, X, y, tr, te, seed, i) for i, tr, te in jobs]
    else:
        from joblib import Parallel, delayed

        fitted = Parallel(n_jobs=n_jobs)(
            delayed(_run_fold)(estimator, X, y, tr, te, seed, i) for i, tr, te in jobs)

    result = CVResult(classes, [])
    for (i, _, test_idx), (est, probs) in zip(jobs, fitted):
        est_classes = np.asarray(getattr(est, "classes_", classes))
        aligned = np.zeros((len(test_idx), len(classes)))
        for j, c in enumerate(classes):
            hit = np.flatnonzero(est_classes == c)
            if hit.size:
                aligned[:, j] = probs[:, hit[0]]
        result.folds.append(fold_metrics(i, test_idx, y[test_idx], aligned, classes))
        if keep_estimators:
            result.estimators.append(est)
    return result


def permute_labels(y, seed: int) -> np.ndarray:
    y = np.asarray(y)
    return y[np.random.default_rng(seed).permutation(len(y))]


def permutation_control(X, y, estimator, k: int = 10, seed: int = 0, n_jobs: int = 1,
                        keep_estimators: bool = False) -> CVResult:
    """Run :func:`run_cv` on a single seeded permutation of the labels."""
    return run_cv(X, permute_labels(y, sub_seed(seed, "permute")), estimator, k, seed,
                  n_jobs, keep_estimators)


# ---------------------------------------------------------------------------
# logistic regression baseline

def logistic_cost(theta: np.ndarray, X: np.ndarray, y: np.ndarray, C: float):
    """``C * sum log(1 + exp(-y (Xw + c))) + w.w / 2`` and its gradient.

    ``theta`` is ``(w, c)``; the intercept is not penalized.
    """
    w, c = theta[:-1], theta[-1]
    margin = y * (X @ w + c)
    # log(1 + exp(-m)) computed stably
    loss = C * np.sum(np.logaddexp(0.0, -margin)) + 0.5 * w @ w
    coef = -C * y * expit(-margin)
    grad = np.empty_like(theta)
    grad[:-1] = X.T @ coef + w
    grad[-1] = coef.sum()
    return float(loss), grad


def fit_logistic(X, y, C: float = 1.0, tol: float = 1e-6, max_iter: int = 200_000,
                 return_trace: bool = False):
    """Gradient descent with Armijo backtracking until the gradient norm < ``tol``.

    Columns are centered internally (an exact reparametrization, since the
    intercept is unpenalized) and each line search starts from the
    Barzilai-Borwein step, which keeps iteration counts low on raw log2 data.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.isfinite(X).all():
        raise NonFiniteFeature("feature matrix contains NaN or infinity")
    mu = X.mean(axis=0)
    Xc = X - mu
    theta = np.zeros(X.shape[1] + 1)
    f, g = logistic_cost(theta, Xc, y, C)
    step = 1.0 / max(C * len(y), 1.0)
    costs = [f]
    for _ in range(max_iter):
        gg = g @ g
        if math.sqrt(gg) < tol:
            break
        while True:
            cand = theta - step * g
            f_new, g_new = logistic_cost(cand, Xc, y, C)
            if f_new <= f - 0.5 * step * gg or step < 1e-300:
                break
            step *= 0.5
        if f_new > f:
            break
        s_k, y_k = cand - theta, g_new - g
        theta, f, g = cand, f_new, g_new
        costs.append(f)
        sy = s_k @ y_k
        step = (s_k @ s_k) / sy if sy > 0 else step * 2.0
    theta[-1] -= mu @ theta[:-1]
    w, c = theta[:-1], theta[-1]
    return (w, c, costs) if return_trace else (w, c)


def _to_pm1(y) -> Tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y)
    classes = np.array(sorted(set(y.tolist()), key=str))
    if classes.size != 2:
        raise OneClassOnly(f"logistic baseline needs exactly two classes, got {classes.size}")
    if set(classes.tolist()) == {-1, 1}:
        classes = np.array([-1, 1])
    return np.where(y == classes[1], 1.0, -1.0), classes


def select_C(X, y, C_grid: Sequence[float], k: int = 10, seed: int = 0):
    """Pick C by mean k-fold CV AUC, ties to the smaller C; returns ``(C, fold_aucs)``."""
    X = np.asarray(X, dtype=np.float64)
    if not np.isfinite(X).all():
        raise NonFiniteFeature("feature matrix contains NaN or infinity")
    ypm, _ = _to_pm1(y)
    folds = stratified_kfold(ypm, k, seed)
    best = None
    for C in sorted(float(c) for c in C_grid):
        aucs = []
        for test in folds:
            train = np.setdiff1d(np.arange(len(ypm)), test)
            w, c = fit_logistic(X[train], ypm[train], C)
            aucs.append(roc_auc(X[test] @ w + c, ypm[test] > 0)[1])
        if best is None or np.mean(aucs) > np.mean(best[1]):
            best = (C, np.array(aucs))
    return best


def logreg_cv(X, y, C_grid: Sequence[float], k: int = 10, seed: int = 0):
    """Select C by CV AUC and refit on all data.

    Returns ``(weights, intercept, fold_aucs_of_selected_C)``.
    """
    C, aucs = select_C(X, y, C_grid, k, seed)
    ypm, _ = _to_pm1(y)
    w, c = fit_logistic(X, ypm, C)
    return w, c, aucs


# ---------------------------------------------------------------------------
# enrichment

@dataclass(frozen=True)
class EnrichmentRow:
    group: str
    overlap: int
    group_size: int
    selected_size: int
    background_size: int
    p_raw: float
    p_holm: float


def holm(pvalues: Sequence[float]) -> np.ndarray:
    """Holm step-down adjusted p-values, returned in the input order."""
    p = np.asarray(pvalues, dtype=np.float64)
    m = p.size
    order = np.argsort(p, kind="mergesort")
    adj = np.empty(m)
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p[i]))
        adj[i] = running
    return adj


def enrich_hypergeom(selected, background, groups: Mapping[str, set]) -> List[EnrichmentRow]:
    """Over-representation of each group in ``selected``; rows sorted by raw p."""
    selected, background = set(selected), set(background)
    if not selected <= background:
        missing = next(iter(selected - background))
        raise SelectionNotInBackground(f"selected item {missing!r} not in background")
    big_n, n = len(background), len(selected)
    names = list(groups)
    stats = []
    for name in names:
        members = set(groups[name]) & background
        big_k, k = len(members), len(members & selected)
        p = float(hypergeom.sf(k - 1, big_n, big_k, n)) if k > 0 else 1.0
        stats.append((name, k, big_k, min(p, 1.0)))
    adj = holm([s[3] for s in stats])
    rows = [EnrichmentRow(name, k, big_k, n, big_n, p, float(max(a, p)))
            for (name, k, big_k, p), a in zip(stats, adj)]
    return sorted(rows, key=lambda r: (r.p_raw, r.group))


# ---------------------------------------------------------------------------
# outputs

def write_enrichment(rows: Sequence[EnrichmentRow], path) -> None:
    with atomic_open(path) as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["group", "overlap", "group_size", "selected_size", "background_size", "p_raw", "p_holm"])
        for r in rows:
            w.writerow([r.group, r.overlap, r.group_size, r.selected_size, r.background_size,
                        f"{r.p_raw:.6g}", f"{r.p_holm:.6g}"])


def write_fold_metrics(result: CVResult, path) -> None:
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "n_test", "accuracy"] + [f"auc_{c}" for c in result.classes])
        for f in result.folds:
            w.writerow([f.fold, len(f.test_index), f"{f.accuracy:.6f}"]
                       + [f"{f.auc.get(c, float('nan')):.6f}" for c in result.classes])


def write_summary(summaries: Mapping[str, Mapping[str, float]], path) -> None:
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "mean", "median", "sd", "ci_low", "ci_high", "k"])
        for name, s in summaries.items():
            w.writerow([name] + [f"{s[key]:.6f}" for key in ("mean", "median", "sd", "ci_low", "ci_high")]
                       + [s["k"]])


def write_roc_points(result: CVResult, cls, path) -> None:
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "fpr", "tpr"])
        for f in result.folds:
            for x, y in f.roc.get(cls, np.zeros((0, 2))):
                w.writerow([f.fold, f"{x:.6f}", f"{y:.6f}"])


def roc_svg(curves: Sequence[np.ndarray], title: str = "", size: int = 320) -> str:
    """Standalone SVG with one polyline per ROC curve and the chance diagonal."""
    pad = 30
    inner = size - 2 * pad

    def pts(points):
        return " ".join(f"{pad + x * inner:.2f},{pad + (1 - y) * inner:.2f}" for x, y in points)

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad + inner}" x2="{pad + inner}" y2="{pad}" stroke="gray" '
        'stroke-dasharray="4 3"/>',
    ]
    for c in curves:
        lines.append(f'<polyline fill="none" stroke="steelblue" stroke-width="1.2" points="{pts(c)}"/>')
    if title:
        lines.append(f'<text x="{size / 2:.0f}" y="18" text-anchor="middle" font-size="13">{title}</text>')
    lines.append(f'<text x="{size / 2:.0f}" y="{size - 8}" text-anchor="middle" font-size="11">FPR</text>')
    lines.append(f'<text x="10" y="{size / 2:.0f}" font-size="11" transform="rotate(-90 10 {size / 2:.0f})">TPR</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
