"""Ordered treemap layout with the pivot-by-middle method.

Every gene leaf gets the same area; a category's area is proportional to its
number of leaves.  The layout only depends on the tree, the within-category
sort key and the side length, so every sample is drawn on the same geometry.
Coordinates are continuous: x grows to the right, y grows downwards.
"""

import csv
import json
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Sequence, Tuple, Union

from ._io import atomic_open
from .errors import EmptyTree, MissingValue, NonPositiveWeight
from .hierarchy import GeneLeaf, HierarchyNode, HierarchyTree

DEFAULT_SIDE = 1024.0
N_PATH_LEVELS = 4


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    def aspect(self) -> float:
        w, h = self.width, self.height
        if w <= 0 or h <= 0:
            return math.inf
        return max(w / h, h / w)

    def contains(self, x: float, y: float) -> bool:
        """Half-open containment ``[x0, x1) x [y0, y1)``."""
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1


@dataclass(frozen=True)
class LayoutEntry:
    kegg_id: str
    copy_index: int
    annotation_path: Tuple[str, ...]
    rect: Rect

    @property
    def center(self) -> Tuple[float, float]:
        return self.rect.center


@dataclass
class TreemapLayout:
    side: float
    entries: List[LayoutEntry]
    category_rects: Dict[Tuple[str, ...], Rect]

    def __len__(self):
        return len(self.entries)

    def keys(self) -> List[Tuple[str, int]]:
        return [(e.kegg_id, e.copy_index) for e in self.entries]

    def worst_aspect_ratio(self) -> float:
        return max(e.rect.aspect() for e in self.entries)


# ---------------------------------------------------------------------------
# pivot partition

def _split(rect: Rect, frac: float, vertical: bool) -> Tuple[Rect, Rect]:
    """Cut ``rect`` in two; ``vertical`` cuts with a vertical line (along x)."""
    if vertical:
        xm = rect.x0 + rect.width * frac
        return Rect(rect.x0, rect.y0, xm, rect.y1), Rect(xm, rect.y0, rect.x1, rect.y1)
    ym = rect.y0 + rect.height * frac
    return Rect(rect.x0, rect.y0, rect.x1, ym), Rect(rect.x0, ym, rect.x1, rect.y1)


def _pivot(weights, lo, hi, rect, out):
    n = hi - lo
    if n == 1:
        out[lo] = rect
        return
    vertical = rect.width >= rect.height
    total = math.fsum(weights[lo:hi])
    if n == 2:
        a, b = _split(rect, weights[lo] / total, vertical)
        out[lo], out[lo + 1] = a, b
        return

    p = lo + n // 2
    s1 = math.fsum(weights[lo:p])
    wp = weights[p]
    length = rect.width if vertical else rect.height
    breadth = rect.height if vertical else rect.width

    # L2 = weights[p+1:m]; pick m so that the pivot is as square as possible
    best_m, best_aspect = p + 1, math.inf
    s2 = 0.0
    for m in range(p + 1, hi + 1):
        if m > p + 1:
            s2 += weights[m - 1]
        strip = length * (wp + s2) / total
        along = breadth * wp / (wp + s2)
        aspect = max(strip / along, along / strip) if strip > 0 and along > 0 else math.inf
        if aspect < best_aspect:
            best_m, best_aspect = m, aspect
    m = best_m
    s2 = math.fsum(weights[p + 1:m])
    s3 = math.fsum(weights[m:hi])

    rest = rect
    if p > lo:
        r1, rest = _split(rest, s1 / total, vertical)
        _pivot(weights, lo, p, r1, out)
    if m < hi:
        strip, r3 = _split(rest, (wp + s2) / (wp + s2 + s3), vertical)
    else:
        strip, r3 = rest, None
    if m > p + 1:
        rp, r2 = _split(strip, wp / (wp + s2), not vertical)
        out[p] = rp
        _pivot(weights, p + 1, m, r2, out)
    else:
        out[p] = strip
    if r3 is not None:
        _pivot(weights, m, hi, r3, out)


def pivot_partition(weights: Sequence[float], rect: Rect) -> List[Rect]:
    """Tile ``rect`` with one rectangle per weight, keeping input order.

    Pivot-by-middle: the middle item is the pivot, items before it fill a
    strip along the longer side, the pivot shares the next strip with the
    following items chosen to make the pivot squarest, the rest fills the
    remainder.  Lists of one or two items are split directly.
    """
    w = [float(x) for x in weights]
    if not w:
        raise NonPositiveWeight("no weights to lay out")
    if any(not (x > 0) or not math.isfinite(x) for x in w):
        raise NonPositiveWeight(f"weights must be positive and finite: {weights!r}")
    out = [None] * len(w)
    _pivot(w, 0, len(w), rect, out)
    return out


# ---------------------------------------------------------------------------
# layout

def _key_lookup(sort_key) -> Callable[[str], float]:
    if callable(sort_key):
        return sort_key
    if sort_key is None:
        return lambda _k: 0.0

    def lookup(k):
        try:
            return float(sort_key[k])
        except KeyError:
            raise MissingValue(f"no sort key for gene {k!r}") from None

    return lookup


def build_layout(tree: HierarchyTree, sort_key: Union[Mapping[str, float], Callable, None] = None,
                 side: float = DEFAULT_SIDE) -> TreemapLayout:
    """Lay out every gene leaf of ``tree`` in the square ``[0, side)^2``.

    Inside each category, sub-categories keep their source order and come
    before genes; genes are ordered by ``sort_key`` descending, ties by id.
    """
    n_total = tree.n_leaves()
    if n_total == 0:
        raise EmptyTree("tree has no gene leaves")
    key = _key_lookup(sort_key)
    entries: List[Tuple[GeneLeaf, Tuple[str, ...], Rect]] = []
    category_rects: Dict[Tuple[str, ...], Rect] = {}

    def place(node: HierarchyNode, path: Tuple[str, ...], rect: Rect):
        category_rects[path] = rect
        kids = [(c, c.n_leaves()) for c in node.children]
        kids = [(c, n) for c, n in kids if n > 0]
        genes = sorted(node.genes, key=lambda g: (-key(g.kegg_id), g.kegg_id))
        weights = [n for _, n in kids] + [1] * len(genes)
        rects = pivot_partition(weights, rect)
        for (child, _), r in zip(kids, rects):
            place(child, path + (child.label,), r)
        for gene, r in zip(genes, rects[len(kids):]):
            entries.append((gene, path, r))

    place(tree, (tree.label,), Rect(0.0, 0.0, float(side), float(side)))

    copies: Dict[str, int] = {}
    out = []
    for gene, path, r in entries:
        idx = copies.get(gene.kegg_id, 0)
        copies[gene.kegg_id] = idx + 1
        out.append(LayoutEntry(gene.kegg_id, idx, path, r))
    return TreemapLayout(float(side), out, category_rects)


# ---------------------------------------------------------------------------
# export / import

STRUCTURE_COLUMNS = (["kegg_id", "copy_index"]
                     + [f"path_level{i + 1}" for i in range(N_PATH_LEVELS)]
                     + ["x0", "y0", "x1", "y1"])


def _padded_path(path: Sequence[str]) -> List[str]:
    path = list(path)[:N_PATH_LEVELS]
    return path + [""] * (N_PATH_LEVELS - len(path))


def export_structure(layout: TreemapLayout, path) -> None:
    """Gene position table, one row per leaf in layout order."""
    with atomic_open(path) as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(STRUCTURE_COLUMNS)
        for e in layout.entries:
            r = e.rect
            w.writerow([e.kegg_id, e.copy_index] + _padded_path(e.annotation_path)
                       + [f"{v:.6f}" for v in (r.x0, r.y0, r.x1, r.y1)])


def import_structure(path, side: float = DEFAULT_SIDE) -> TreemapLayout:
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        for row in reader:
            p = tuple(row[f"path_level{i + 1}"] for i in range(N_PATH_LEVELS))
            p = tuple(x for x in p if x)
            rect = Rect(*(float(row[c]) for c in ("x0", "y0", "x1", "y1")))
            entries.append(LayoutEntry(row["kegg_id"], int(row["copy_index"]), p, rect))
    return TreemapLayout(float(side), entries, {})


def layout_to_json(layout: TreemapLayout) -> str:
    obj = {
        "side": layout.side,
        "entries": [
            {"kegg_id": e.kegg_id, "copy_index": e.copy_index, "path": list(e.annotation_path),
             "rect": [e.rect.x0, e.rect.y0, e.rect.x1, e.rect.y1]}
            for e in layout.entries
        ],
        "categories": [
            {"path": list(p), "rect": [r.x0, r.y0, r.x1, r.y1]}
            for p, r in layout.category_rects.items()
        ],
    }
    return json.dumps(obj, separators=(",", ":")) + "\n"


def layout_from_json(text: str) -> TreemapLayout:
    obj = json.loads(text)
    entries = [LayoutEntry(e["kegg_id"], int(e["copy_index"]), tuple(e["path"]), Rect(*e["rect"]))
               for e in obj["entries"]]
    cats = {tuple(c["path"]): Rect(*c["rect"]) for c in obj.get("categories", [])}
    return TreemapLayout(float(obj["side"]), entries, cats)


def save_layout(layout: TreemapLayout, path) -> None:
    with atomic_open(path) as fh:
        fh.write(layout_to_json(layout))


def load_layout(path) -> TreemapLayout:
    with open(path, encoding="utf-8") as fh:
        return layout_from_json(fh.read())
