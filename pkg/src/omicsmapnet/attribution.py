"""Back-project strong Pool3 responses onto treemap genes.

For each sample the Pool3 channel with the largest total activation is kept,
its top fraction of pixels is selected, and every selected pixel is mapped to
the square of the layout it covers (side ``layout.side / pool_side``).  A gene
copy is hit when its rectangle center lies in a selected square.
"""

import csv
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from ._io import atomic_open
from .errors import InconsistentSides
from .treemap import N_PATH_LEVELS, TreemapLayout


@dataclass(frozen=True)
class AttributionRow:
    kegg_id: str
    copy_index: int
    annotation_path: Tuple[str, ...]
    center: Tuple[float, float]
    pool_pixel: Tuple[int, int]
    selection_count: int
    n_samples: int


def strongest_feature_map(maps: np.ndarray) -> Tuple[int, np.ndarray]:
    """Channel with the largest sum (lowest index on ties) and its map."""
    maps = np.asarray(maps)
    if maps.ndim != 3 or maps.shape[2] < 1:
        raise ValueError(f"expected an h x w x C tensor, got {maps.shape}")
    sums = maps.sum(axis=(0, 1))
    ch = int(np.argmax(sums))
    return ch, maps[:, :, ch]


def top_fraction_pixels(fmap: np.ndarray, frac: float = 0.1) -> List[Tuple[int, int]]:
    """The ``floor(frac * h * w)`` brightest pixels as (row, col).

    Ordered by intensity descending, then row, then column.  An all-zero map
    selects nothing.
    """
    if not 0 < frac <= 1:
        raise ValueError("frac must be in (0, 1]")
    fmap = np.asarray(fmap)
    h, w = fmap.shape
    if not np.any(fmap):
        return []
    k = int(math.floor(frac * h * w))
    rows, cols = np.divmod(np.arange(h * w), w)
    order = np.lexsort((cols, rows, -fmap.ravel()))[:k]
    return [(int(rows[i]), int(cols[i])) for i in order]


def owning_pixel(x: float, y: float, side: float, pool_side: int) -> Tuple[int, int]:
    """Pool pixel (row, col) whose square ``[j*PR, (j+1)*PR) x [i*PR, (i+1)*PR)`` holds (x, y)."""
    pr = side / pool_side

    def cell(v):
        j = min(int(math.floor(v / pr)), pool_side - 1)
        # guard the float division at square boundaries
        if j > 0 and v < j * pr:
            j -= 1
        elif j < pool_side - 1 and v >= (j + 1) * pr:
            j += 1
        return j

    return cell(y), cell(x)


def select_pixels(maps: np.ndarray, frac: float = 0.1) -> List[List[Tuple[int, int]]]:
    """Per-sample selections from a stack of Pool3 maps (N, h, w, C)."""
    return [top_fraction_pixels(strongest_feature_map(m)[1], frac) for m in maps]


def project_to_genes(selected: Mapping[str, Sequence[Tuple[int, int]]] | Sequence,
                     layout: TreemapLayout, pool_side: int) -> List[AttributionRow]:
    """Count, per gene copy, the samples whose selection covers its center."""
    if pool_side < 1:
        raise InconsistentSides("pool side must be positive")
    if pool_side > layout.side:
        raise InconsistentSides(f"pool side {pool_side} exceeds layout side {layout.side}")
    per_sample = list(selected.values()) if isinstance(selected, Mapping) else list(selected)
    n_samples = len(per_sample)

    hits = np.zeros((pool_side, pool_side), dtype=np.int64)
    for pixels in per_sample:
        mask = np.zeros((pool_side, pool_side), dtype=bool)
        for i, j in pixels:
            if not (0 <= i < pool_side and 0 <= j < pool_side):
                raise InconsistentSides(f"pixel {(i, j)} outside a {pool_side}x{pool_side} map")
            mask[i, j] = True
        hits += mask

    rows = []
    for e in layout.entries:
        cx, cy = e.center
        i, j = owning_pixel(cx, cy, layout.side, pool_side)
        rows.append(AttributionRow(e.kegg_id, e.copy_index, e.annotation_path, (cx, cy),
                                   (i, j), int(hits[i, j]), n_samples))
    return rows


def attribute(maps: np.ndarray, layout: TreemapLayout, frac: float = 0.1) -> List[AttributionRow]:
    """Selection + projection for a stack of Pool3 maps."""
    maps = np.asarray(maps)
    return project_to_genes(select_pixels(maps, frac), layout, maps.shape[1])


def sorted_rows(rows: Sequence[AttributionRow]) -> List[AttributionRow]:
    return sorted(rows, key=lambda r: (-r.selection_count, r.kegg_id, r.copy_index))


def top_selected(rows: Sequence[AttributionRow], frac: float = 0.1) -> List[AttributionRow]:
    """The most-selected ``ceil(frac * n)`` gene copies.

    Copies never selected are not eligible, so the result can be shorter.
    """
    k = int(math.ceil(frac * len(rows)))
    return [r for r in sorted_rows(rows)[:k] if r.selection_count > 0]


REPORT_COLUMNS = (["kegg_id", "copy_index"]
                  + [f"path_level{i + 1}" for i in range(N_PATH_LEVELS)]
                  + ["center_x", "center_y", "pool_row", "pool_col", "selection_count", "n_samples"])


def export_report(rows: Sequence[AttributionRow], path) -> None:
    with atomic_open(path) as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in sorted_rows(rows):
            p = list(r.annotation_path)[:N_PATH_LEVELS]
            p += [""] * (N_PATH_LEVELS - len(p))
            w.writerow([r.kegg_id, r.copy_index] + p
                       + [f"{r.center[0]:.6f}", f"{r.center[1]:.6f}", r.pool_pixel[0], r.pool_pixel[1],
                          r.selection_count, r.n_samples])


def import_report(path) -> List[AttributionRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            p = tuple(x for x in (row[f"path_level{i + 1}"] for i in range(N_PATH_LEVELS)) if x)
            rows.append(AttributionRow(
                row["kegg_id"], int(row["copy_index"]), p,
                (float(row["center_x"]), float(row["center_y"])),
                (int(row["pool_row"]), int(row["pool_col"])),
                int(row["selection_count"]), int(row["n_samples"])))
    return rows
