"""Connected components of binary masks, per-cluster shape statistics,
follow-up comparison reports and size histograms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError

_STATS_MAGIC = "# calcseg shape stats v1"
_STATS_COLUMNS = ("label", "num_calcifications", "mean_area_mm2", "area_std_mm2",
                  "pixel_spacing_mm", "pixel_counts")
DEFAULT_BIN_EDGES = tuple(range(0, 101, 10))


@dataclass(frozen=True)
class Component:
    id: int
    pixel_count: int
    bbox: tuple[int, int, int, int]  # y0, x0, y1, x1 (exclusive ends)
    centroid: tuple[float, float]


@dataclass
class ComponentSet:
    label_grid: np.ndarray
    components: list[Component]
    connectivity: int = 8

    def __len__(self):
        return len(self.components)

    @property
    def shape(self):
        return self.label_grid.shape

    @property
    def pixel_counts(self) -> list[int]:
        return [c.pixel_count for c in self.components]


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 8:
        return np.ones((3, 3), bool)
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}")


def connected_components(mask, connectivity: int = 8) -> ComponentSet:
    """Label the foreground of a binary mask.

    Ids run 1..n in row-major order of each component's first pixel.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ConfigError(f"mask must be 2D, got {mask.ndim}D")
    raw, n = ndimage.label(mask, structure=_structure(connectivity))
    if n == 0:
        return ComponentSet(np.zeros(mask.shape, np.int32), [], connectivity)
    flat = raw.ravel()
    fg = np.flatnonzero(flat)
    _, first = np.unique(flat[fg], return_index=True)
    # old label (1-based) -> rank of its first pixel
    order = np.argsort(fg[first], kind="stable")
    remap = np.zeros(n + 1, np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    labels = remap[raw]

    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n + 1)
    ys, xs = np.divmod(np.arange(flat.size), mask.shape[1])
    sum_y = np.bincount(flat, weights=ys, minlength=n + 1)
    sum_x = np.bincount(flat, weights=xs, minlength=n + 1)
    comps = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        comps.append(Component(
            id=i, pixel_count=int(counts[i]),
            bbox=(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop),
            centroid=(sum_y[i] / counts[i], sum_x[i] / counts[i])))
    return ComponentSet(labels, comps, connectivity)


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    """Foreground where probability >= threshold."""
    return np.asarray(probs) >= threshold


def crop_region(grid, region):
    """Restrict to a (y0, x0, y1, x1) box, e.g. a clinician-marked cluster region."""
    if region is None:
        return grid
    y0, x0, y1, x1 = region
    return np.asarray(grid)[y0:y1, x0:x1]


@dataclass
class ShapeStats:
    num_calcifications: int
    mean_area_mm2: float
    area_std_mm2: float
    areas_mm2: tuple[float, ...] = ()
    pixel_spacing_mm: float = 0.1
    pixel_counts: tuple[int, ...] = ()
    label: str = ""

    @classmethod
    def from_pixel_counts(cls, counts, pixel_spacing_mm: float, label: str = "") -> "ShapeStats":
        if not pixel_spacing_mm > 0:
            raise ConfigError(f"pixel_spacing_mm must be positive, got {pixel_spacing_mm}")
        counts = tuple(int(c) for c in counts)
        px_area = pixel_spacing_mm ** 2
        areas = tuple(c * px_area for c in counts)
        n = len(areas)
        mean = math.fsum(areas) / n if n else 0.0
        # sample (n - 1) estimator; defined as 0 for a single component
        std = math.sqrt(math.fsum((a - mean) ** 2 for a in areas) / (n - 1)) if n > 1 else 0.0
        return cls(n, mean, std, areas, pixel_spacing_mm, counts, label)


def shape_stats(components: ComponentSet, pixel_spacing_mm: float, label: str = "") -> ShapeStats:
    return ShapeStats.from_pixel_counts(components.pixel_counts, pixel_spacing_mm, label)


def format_stats_table(stats: ShapeStats) -> str:
    rows = [
        ("# Calcifications", f"{stats.num_calcifications}"),
        ("Mean area [mm^2]", f"{stats.mean_area_mm2:.2f}"),
        ("Area STD [mm^2]", f"{stats.area_std_mm2:.2f}"),
    ]
    width = max(len(v) for _, v in rows)
    lines = ["Shape Statistics", "-" * (18 + 2 + width)]
    lines += [f"{name:<18}  {value:>{width}}" for name, value in rows]
    return "\n".join(lines) + "\n"


def stats_record(stats: ShapeStats) -> str:
    return "\t".join([
        stats.label, str(stats.num_calcifications), repr(stats.mean_area_mm2),
        repr(stats.area_std_mm2), repr(stats.pixel_spacing_mm),
        ",".join(map(str, stats.pixel_counts))])


def write_stats(path, stats: list[ShapeStats] | ShapeStats) -> Path:
    if isinstance(stats, ShapeStats):
        stats = [stats]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [_STATS_MAGIC, "\t".join(_STATS_COLUMNS)] + [stats_record(s) for s in stats]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_stats(path) -> list[ShapeStats]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _STATS_MAGIC:
        raise DataError(f"{path}: not a shape-statistics file")
    out = []
    for line in lines[2:]:
        if not line:
            continue
        label, n, mean, std, spacing, counts = line.split("\t")
        counts = tuple(int(c) for c in counts.split(",") if c)
        spacing = float(spacing)
        out.append(ShapeStats(int(n), float(mean), float(std),
                              tuple(c * spacing ** 2 for c in counts), spacing, counts, label))
    return out


@dataclass
class ComparisonReport:
    before: ShapeStats
    after: ShapeStats
    before_label: str = "before"
    after_label: str = "after"

    @property
    def delta_count(self) -> int:
        return self.after.num_calcifications - self.before.num_calcifications

    @property
    def delta_mean_area_mm2(self) -> float:
        return self.after.mean_area_mm2 - self.before.mean_area_mm2

    @property
    def delta_area_std_mm2(self) -> float:
        return self.after.area_std_mm2 - self.before.area_std_mm2

    def rows(self):
        b, a = self.before, self.after
        return [
            ("#Calcifications", f"{b.num_calcifications}", f"{a.num_calcifications}",
             f"{self.delta_count:+d}"),
            ("Mean area [mm^2]", f"{b.mean_area_mm2:.2f}", f"{a.mean_area_mm2:.2f}",
             f"{self.delta_mean_area_mm2:+.2f}"),
            ("Area STD [mm^2]", f"{b.area_std_mm2:.2f}", f"{a.area_std_mm2:.2f}",
             f"{self.delta_area_std_mm2:+.2f}"),
        ]

    def to_text(self) -> str:
        header = ("", self.before_label, self.after_label, "Delta")
        rows = self.rows()
        widths = [max(len(r[i]) for r in [header, *rows]) for i in range(4)]
        widths[1:] = [max(w, 6) for w in widths[1:]]

        def fmt(r):
            return f"{r[0]:<{widths[0]}}" + "".join(
                f"  {c:>{w}}" for c, w in zip(r[1:], widths[1:]))

        lines = ["Shape Statistics", "-" * len(fmt(header)), fmt(header).rstrip()]
        lines += [fmt(r) for r in rows]
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        b, a = self.before, self.after
        lines = ["metric\t" + "\t".join((self.before_label, self.after_label, "delta")),
                 f"num_calcifications\t{b.num_calcifications}\t{a.num_calcifications}\t"
                 f"{self.delta_count}",
                 f"mean_area_mm2\t{b.mean_area_mm2!r}\t{a.mean_area_mm2!r}\t"
                 f"{self.delta_mean_area_mm2!r}",
                 f"area_std_mm2\t{b.area_std_mm2!r}\t{a.area_std_mm2!r}\t"
                 f"{self.delta_area_std_mm2!r}"]
        return "\n".join(lines) + "\n"


def compare_followup(before: ShapeStats, after: ShapeStats, before_label: str | None = None,
                     after_label: str | None = None) -> ComparisonReport:
    return ComparisonReport(before, after, before_label or before.label or "before",
                            after_label or after.label or "after")


@dataclass
class SizeHistogram:
    edges: tuple[int, ...]
    counts: np.ndarray = field(repr=False)

    def to_tsv(self) -> str:
        lines = ["bin_start_px\tbin_end_px\tcount"]
        ends = list(self.edges[1:]) + ["inf"]
        lines += [f"{lo}\t{hi}\t{int(c)}" for lo, hi, c in zip(self.edges, ends, self.counts)]
        return "\n".join(lines) + "\n"


def size_histogram(stats: list[ShapeStats], bin_edges=DEFAULT_BIN_EDGES) -> SizeHistogram:
    """Component sizes in pixels binned as [e_i, e_{i+1}); the last bin is [e_last, inf).

    Sizes below the first edge are not counted.
    """
    edges = tuple(int(e) for e in bin_edges)
    if not edges:
        raise ConfigError("bin_edges must not be empty")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ConfigError(f"bin edges must be strictly increasing, got {edges}")
    sizes = np.array([c for s in stats for c in s.pixel_counts], dtype=np.int64)
    idx = np.searchsorted(np.asarray(edges), sizes, side="right") - 1
    counts = np.bincount(idx[idx >= 0], minlength=len(edges))[:len(edges)]
    return SizeHistogram(edges, counts)
