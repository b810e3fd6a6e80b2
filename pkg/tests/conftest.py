"""Shared fixtures: hand-built records with known geometry and saliency."""

import numpy as np
import pytest

from saldet.core import (
    Box,
    ImageRecord,
    LabelVector,
    SaliencyMap,
    SuperpixelGrid,
    proposal_from_superpixels,
)


def tiling_grid(side_px: int, sp_side: int) -> SuperpixelGrid:
    """Regular sp_side x sp_side tiling of a square image."""
    block = side_px // sp_side
    yy, xx = np.mgrid[0:side_px, 0:side_px]
    labels = ((yy // block) * sp_side + (xx // block)).astype(np.int32)
    return SuperpixelGrid(width=side_px, height=side_px, labels=labels)


def build_record(rec_id, grid, proposal_ids, features, y, saliency_values, gt_boxes):
    """Assemble an ImageRecord from plain arrays."""
    proposals = [proposal_from_superpixels(grid, ids) for ids in proposal_ids]
    saliency = {
        c: SaliencyMap(class_id=c, values=v) for c, v in saliency_values.items()
    }
    return ImageRecord(
        id=rec_id,
        grid=grid,
        proposals=proposals,
        features=np.asarray(features, dtype=np.float64),
        labels=LabelVector(y=np.asarray(y, dtype=np.int8)),
        saliency=saliency,
        gt_boxes=gt_boxes,
    )


@pytest.fixture
def touching_objects_record():
    """Two touching 2x2-superpixel objects whose saliency maps bleed into
    each other at 0.55 of the peak.

    Thresholding either map at half its peak merges both objects into one
    component, while the contrast scores still separate them: the exact
    object region scores 1 - 1.1/6, the two-object union only 0.775.
    """
    grid = tiling_grid(16, 4)
    a_ids = [4, 5, 8, 9]     # rows 1-2, cols 0-1
    b_ids = [6, 7, 10, 11]   # rows 1-2, cols 2-3

    map0 = np.zeros((16, 16))
    map0[np.isin(grid.labels, a_ids)] = 1.0
    map0[np.isin(grid.labels, b_ids)] = 0.55
    map1 = np.zeros((16, 16))
    map1[np.isin(grid.labels, b_ids)] = 1.0
    map1[np.isin(grid.labels, a_ids)] = 0.55

    features = np.array(
        [[1.0, 0.0, 0.0, 0.0],
         [0.0, 1.0, 0.0, 0.0],
         [0.5, 0.5, 0.0, 0.0]]
    )
    return build_record(
        "touching",
        grid,
        [a_ids, b_ids, sorted(a_ids + b_ids)],
        features,
        [1, 1],
        {0: map0, 1: map1},
        [(0, Box(0, 4, 8, 12)), (1, Box(8, 4, 16, 12))],
    )


@pytest.fixture
def two_superpixel_record():
    """Minimal record: a 4x2 image split into two 2x2 superpixels.

    Saliency is 0.8 on the left superpixel and 0.2 on the right, so
    RS/NS values are exact rationals for hand checks.
    """
    labels = np.array([[0, 0, 1, 1], [0, 0, 1, 1]], dtype=np.int32)
    grid = SuperpixelGrid(width=4, height=2, labels=labels)
    values = np.where(labels == 0, 0.8, 0.2).astype(np.float64)
    return build_record(
        "twosp",
        grid,
        [[0], [1], [0, 1]],
        np.eye(3, 2),
        [1, -1],
        {0: values},
        [(0, Box(0, 0, 2, 2))],
    )
