"""Context-aware seed selection from class-specific saliency maps.

For every labeled class the proposal with the highest area-weighted
saliency contrast (mean in-region saliency minus mean saliency of the
adjacent superpixels) becomes the class seed; an equal number of
negatives is mined from the proposals with the lowest in-region
saliency. The simpler map-thresholding baseline is provided for
comparison: it merges touching salient objects into one box, which is
exactly the failure mode seed selection avoids.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _accel
from .core import Box, ImageRecord, adjacency

log = logging.getLogger(__name__)

# cap on area/sigma^2 before exponentiation; exp(64) is ~6e27, far beyond
# any meaningful contrast scale, so capping only guards float overflow
_EXP_ARG_CAP = 64.0


@dataclass(frozen=True)
class SeedScore:
    """Contrast score of one proposal for one class."""

    proposal_index: int
    class_id: int
    rs: float        # mean saliency inside the proposal
    ns: float        # mean saliency of the adjacent superpixels
    contrast: float  # exp(area/sigma^2) * (rs - ns)


@dataclass(frozen=True)
class SeedAssignment:
    """Seeds and mined negatives of one image.

    ``seeds`` pairs each positive class (ascending) with its seed
    proposal index. ``sample_indices`` lists the seed indices followed by
    the negatives; ``targets`` aligns 1.0 / 0.0 with that order. Two
    classes may share a seed proposal, but negatives are always disjoint
    from every seed and from each other.
    """

    seeds: tuple[tuple[int, int], ...]  # (class_id, proposal_index)
    negatives: tuple[int, ...]

    def __post_init__(self):
        classes = [c for c, _ in self.seeds]
        if classes != sorted(set(classes)):
            raise ValueError("seed classes must be unique and ascending")
        seed_set = {i for _, i in self.seeds}
        if seed_set & set(self.negatives):
            raise ValueError("negatives must be disjoint from seeds")
        if len(set(self.negatives)) != len(self.negatives):
            raise ValueError("negatives must be distinct")
        if len(self.negatives) > len(self.seeds):
            raise ValueError("more negatives than seeds")

    @property
    def seed_for(self) -> dict[int, int]:
        return dict(self.seeds)

    @property
    def sample_indices(self) -> tuple[int, ...]:
        return tuple(i for _, i in self.seeds) + self.negatives

    @property
    def targets(self) -> np.ndarray:
        return np.array(
            [1.0] * len(self.seeds) + [0.0] * len(self.negatives), dtype=np.float64
        )


# ---------------------------------------------------------------------------
# scoring

def region_saliency(grid, proposal, smap) -> float:
    """Mean saliency over the proposal's pixels."""
    sums = _accel.superpixel_sums(
        grid.labels, np.asarray(smap.values, dtype=np.float64), grid.n_superpixels
    )
    ids = np.fromiter(proposal.superpixel_ids, dtype=np.int64)
    return float(sums[ids].sum() / proposal.area_px)


def neighborhood_saliency(grid, proposal, smap, adj) -> float:
    """Mean saliency over superpixels adjacent to the proposal.

    The neighborhood is the union of neighbors of the member superpixels
    minus the members themselves; an empty neighborhood scores 0.
    """
    sums = _accel.superpixel_sums(
        grid.labels, np.asarray(smap.values, dtype=np.float64), grid.n_superpixels
    )
    counts = _accel.superpixel_counts(grid.labels, grid.n_superpixels)
    ids = np.fromiter(proposal.superpixel_ids, dtype=np.int64)
    nb = adj[ids].any(axis=0)
    nb[ids] = False
    if not nb.any():
        return 0.0
    return float(sums[nb].sum() / counts[nb].sum())


def saliency_contrast(rs: float, ns: float, area_px: int, sigma: float) -> float:
    """Area-weighted contrast exp(area/sigma^2) * (rs - ns)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    arg = area_px / (sigma * sigma)
    if arg > _EXP_ARG_CAP:
        log.warning(
            "capping exp argument area/sigma^2 = %.3g at %g", arg, _EXP_ARG_CAP
        )
        arg = _EXP_ARG_CAP
    return math.exp(arg) * (rs - ns)


def _record_geometry(record: ImageRecord):
    """Per-proposal member ids and neighborhood masks, shared across classes."""
    grid = record.grid
    adj = adjacency(grid)
    counts = _accel.superpixel_counts(grid.labels, grid.n_superpixels)
    geometry = []
    for prop in record.proposals:
        ids = np.fromiter(prop.superpixel_ids, dtype=np.int64)
        nb = adj[ids].any(axis=0)
        nb[ids] = False
        nb_px = int(counts[nb].sum())
        geometry.append((ids, nb, prop.area_px, nb_px))
    return geometry, counts


def _class_sums(record, class_id):
    grid = record.grid
    return _accel.superpixel_sums(
        grid.labels,
        np.asarray(record.saliency[class_id].values, dtype=np.float64),
        grid.n_superpixels,
    )


def _class_rs(record, class_id, geometry):
    """Region saliency of every proposal for one class."""
    sums = _class_sums(record, class_id)
    return np.array([sums[ids].sum() / area for ids, _, area, _ in geometry])


def _class_scores(record, class_id, sigma, geometry):
    """(rs, ns, contrast) arrays over all proposals for one class."""
    sums = _class_sums(record, class_id)
    n = len(geometry)
    rs = np.empty(n)
    ns = np.empty(n)
    sc = np.empty(n)
    for i, (ids, nb, area_px, nb_px) in enumerate(geometry):
        rs[i] = sums[ids].sum() / area_px
        ns[i] = sums[nb].sum() / nb_px if nb_px > 0 else 0.0
        sc[i] = saliency_contrast(rs[i], ns[i], area_px, sigma)
    return rs, ns, sc


def select_seeds(record: ImageRecord, sigma: float) -> dict[int, SeedScore]:
    """Pick the highest-contrast proposal per positive class.

    Ties break toward the lowest proposal index.
    """
    geometry, _ = _record_geometry(record)
    chosen = {}
    for c in record.labels.positives:
        rs, ns, sc = _class_scores(record, c, sigma, geometry)
        i = int(np.argmax(sc))  # argmax returns the first (lowest) index on ties
        chosen[c] = SeedScore(
            proposal_index=i, class_id=c, rs=float(rs[i]), ns=float(ns[i]),
            contrast=float(sc[i]),
        )
    return chosen


def select_negatives(record: ImageRecord, seeds: dict[int, SeedScore]) -> SeedAssignment:
    """Mine one lowest-region-saliency negative per positive class.

    Classes are processed in ascending order; every pick excludes all
    seeds and previously mined negatives, so negatives stay disjoint.
    When the image has too few proposals the negative list is truncated
    with a warning.
    """
    geometry, _ = _record_geometry(record)
    used = {score.proposal_index for score in seeds.values()}
    negatives = []
    n_props = record.num_proposals
    for c in sorted(seeds):
        blocked = used | set(negatives)
        if len(blocked) >= n_props:
            log.warning(
                "record %s: only %d proposals for %d samples; negatives truncated",
                record.id, n_props, 2 * len(seeds),
            )
            break
        masked = _class_rs(record, c, geometry)
        masked[list(blocked)] = np.inf
        negatives.append(int(np.argmin(masked)))
    seed_items = tuple((c, seeds[c].proposal_index) for c in sorted(seeds))
    return SeedAssignment(seeds=seed_items, negatives=tuple(negatives))


def make_assignment(record: ImageRecord, sigma: float) -> SeedAssignment:
    """Seed selection followed by negative mining, as one call."""
    return select_negatives(record, select_seeds(record, sigma))


# ---------------------------------------------------------------------------
# thresholding baseline

def threshold_baseline(smap, theta: float = 0.5) -> list[Box]:
    """Boxes of the 4-connected components above ``theta * max(map)``.

    The comparator for seed selection: each component's minimum
    enclosing rectangle, in scan order. An all-zero map yields no boxes.
    """
    if not (0.0 < theta < 1.0):
        raise ValueError("theta must be in (0, 1)")
    values = np.asarray(smap.values, dtype=np.float64)
    peak = values.max()
    if peak <= 0.0:
        return []
    mask = values >= theta * peak
    comp, count = _accel.connected_components(mask)
    boxes = []
    for label in range(count):
        ys, xs = np.nonzero(comp == label)
        boxes.append(Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1))
    return boxes
