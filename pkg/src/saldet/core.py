"""Geometry and dataset domain types shared by every stage of the pipeline.

Boxes use half-open integer pixel intervals [x0, x1) x [y0, y1), so the
area is exactly (x1 - x0) * (y1 - y0) and IoU arithmetic is exact.
Superpixel adjacency is 4-connected: two superpixels are neighbors iff
some pixel pair of theirs shares a horizontal or vertical edge. All
types are immutable after construction (arrays are marked read-only).
"""

from dataclasses import dataclass, field

import numpy as np

from . import _accel


@dataclass(frozen=True, order=True)
class Box:
    """Axis-aligned half-open pixel rectangle with positive area."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if min(self.x0, self.y0) < 0:
            raise ValueError(f"box origin must be >= 0, got {self}")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"box must have positive extent, got {self}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two half-open boxes, in [0, 1]."""
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class SuperpixelGrid:
    """Row-major grid of superpixel ids covering every pixel.

    Every id in [0, n_superpixels) must occur at least once.
    """

    width: int
    height: int
    labels: np.ndarray  # (height, width) int32

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int32)
        if labels.shape != (self.height, self.width):
            raise ValueError(
                f"labels shape {labels.shape} does not match "
                f"(height, width)=({self.height}, {self.width})"
            )
        if labels.size == 0:
            raise ValueError("grid must contain at least one pixel")
        if labels.min() < 0:
            raise ValueError("labels: negative superpixel id")
        n = int(labels.max()) + 1
        if np.any(np.bincount(labels.ravel(), minlength=n) == 0):
            raise ValueError("labels: every id in [0, n_superpixels) must occur")
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def n_superpixels(self) -> int:
        return int(self.labels.max()) + 1


def adjacency(grid: SuperpixelGrid) -> np.ndarray:
    """Symmetric, irreflexive boolean adjacency matrix of the superpixels.

    ``adj[i, j]`` is True iff superpixels i and j share a 4-connected
    pixel edge; row i is the neighbor indicator of superpixel i.
    """
    return _accel.adjacency_matrix(grid.labels, grid.n_superpixels)


@dataclass(frozen=True, eq=False)
class Proposal:
    """A region proposal: a nonempty union of superpixels.

    ``bbox`` and ``area_px`` are derived from the member pixels; build
    proposals with :func:`proposal_from_superpixels` rather than by hand.
    """

    superpixel_ids: tuple[int, ...]
    bbox: Box
    area_px: int

    def __post_init__(self):
        if not self.superpixel_ids:
            raise ValueError("proposal must contain at least one superpixel")
        ids = tuple(sorted(self.superpixel_ids))
        if len(set(ids)) != len(ids):
            raise ValueError("proposal superpixel ids must be unique")
        object.__setattr__(self, "superpixel_ids", ids)
        if self.area_px <= 0:
            raise ValueError("proposal must cover at least one pixel")


def proposal_from_superpixels(grid: SuperpixelGrid, ids) -> Proposal:
    """Build a proposal from superpixel ids, deriving bbox and pixel area."""
    ids = tuple(sorted(int(i) for i in ids))
    if not ids:
        raise ValueError("proposal must contain at least one superpixel")
    if ids[0] < 0 or ids[-1] >= grid.n_superpixels:
        raise ValueError(f"superpixel id out of range [0, {grid.n_superpixels})")
    member = np.isin(grid.labels, ids)
    ys, xs = np.nonzero(member)
    if ys.size == 0:
        raise ValueError("proposal covers no pixels")
    bbox = Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    return Proposal(superpixel_ids=ids, bbox=bbox, area_px=int(ys.size))


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    """Per-pixel non-negative evidence for one class."""

    class_id: int
    values: np.ndarray  # (height, width) float32

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ValueError("saliency values must be a 2-d grid")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"saliency map for class {self.class_id}: non-finite values")
        if values.min() < 0:
            raise ValueError(f"saliency map for class {self.class_id}: negative values")
        object.__setattr__(self, "values", _freeze(values))


@dataclass(frozen=True, eq=False)
class LabelVector:
    """Image-level presence/absence labels, entries in {+1, -1}."""

    y: np.ndarray  # (C,) int8

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.int8)
        if y.ndim != 1 or y.size == 0:
            raise ValueError("labels must be a nonempty 1-d vector")
        if not np.all(np.abs(y) == 1):
            raise ValueError("labels: entries must be +1 or -1")
        if not np.any(y == 1):
            raise ValueError("labels: at least one positive class required")
        object.__setattr__(self, "y", _freeze(y))

    @property
    def num_classes(self) -> int:
        return int(self.y.size)

    @property
    def positives(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.flatnonzero(self.y == 1))


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One example: superpixel grid, proposals, features, labels, saliency.

    ``saliency`` maps each positive class id to its class-specific map;
    maps must exist exactly for the positive classes. ``gt_boxes`` is the
    optional list of (class_id, Box) ground truth used only by evaluation.
    Array payloads are stored in float32, the on-disk precision.
    """

    id: str
    grid: SuperpixelGrid
    proposals: list[Proposal]
    features: np.ndarray  # (N_R, D) float32
    labels: LabelVector
    saliency: dict[int, SaliencyMap]
    gt_boxes: list[tuple[int, Box]] = field(default_factory=list)

    def __post_init__(self):
        if not self.proposals:
            raise ValueError(f"record {self.id}: needs at least one proposal")
        features = np.asarray(self.features, dtype=np.float32)
        if features.ndim != 2 or features.shape[0] != len(self.proposals):
            raise ValueError(
                f"record {self.id}: features shape {features.shape} does not "
                f"match {len(self.proposals)} proposals"
            )
        if not np.all(np.isfinite(features)):
            raise ValueError(f"record {self.id}: non-finite feature values")
        object.__setattr__(self, "features", _freeze(features))

        shape = (self.grid.height, self.grid.width)
        if set(self.saliency) != set(self.labels.positives):
            raise ValueError(
                f"record {self.id}: saliency classes {sorted(self.saliency)} != "
                f"positive classes {sorted(self.labels.positives)}"
            )
        for c, m in self.saliency.items():
            if m.class_id != c:
                raise ValueError(f"record {self.id}: saliency key {c} holds map for {m.class_id}")
            if m.values.shape != shape:
                raise ValueError(
                    f"record {self.id}: saliency map {c} shape {m.values.shape} "
                    f"does not match grid {shape}"
                )
        n_sp = self.grid.n_superpixels
        for k, p in enumerate(self.proposals):
            if p.superpixel_ids[-1] >= n_sp:
                raise ValueError(f"record {self.id}: proposal {k} references unknown superpixel")
        for c, box in self.gt_boxes:
            if not (0 <= c < self.labels.num_classes):
                raise ValueError(f"record {self.id}: gt box class {c} out of range")
            if box.x1 > self.grid.width or box.y1 > self.grid.height:
                raise ValueError(f"record {self.id}: gt box {box} exceeds grid bounds")

    @property
    def num_proposals(self) -> int:
        return len(self.proposals)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])
