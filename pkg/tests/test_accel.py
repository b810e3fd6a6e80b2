"""Parity between the compiled kernels and their pure-numpy fallbacks."""

import subprocess
import sys

import numpy as np

from oracles import bfs_components
from saldet import _accel


def random_labels(rng, h, w, n_sp):
    return rng.integers(0, n_sp, size=(h, w)).astype(np.int32)


class TestPathParity:
    """The dispatched kernel must agree with the fallback bit for bit."""

    def test_adjacency(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            h, w = int(rng.integers(2, 20)), int(rng.integers(2, 20))
            n_sp = int(rng.integers(2, 12))
            labels = random_labels(rng, h, w, n_sp)
            np.testing.assert_array_equal(
                _accel.adjacency_matrix(labels, n_sp),
                _accel.adjacency_matrix_py(labels, n_sp),
            )

    def test_superpixel_reductions(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            h, w = int(rng.integers(2, 20)), int(rng.integers(2, 20))
            n_sp = int(rng.integers(2, 12))
            labels = random_labels(rng, h, w, n_sp)
            values = rng.normal(size=(h, w))
            np.testing.assert_allclose(
                _accel.superpixel_sums(labels, values, n_sp),
                _accel.superpixel_sums_py(labels, values, n_sp),
                rtol=1e-12,
            )
            np.testing.assert_array_equal(
                _accel.superpixel_counts(labels, n_sp),
                _accel.superpixel_counts_py(labels, n_sp),
            )

    def test_connected_components(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            h, w = int(rng.integers(2, 24)), int(rng.integers(2, 24))
            mask = rng.random((h, w)) < 0.55
            got_l, got_n = _accel.connected_components(mask)
            py_l, py_n = _accel.connected_components_py(mask)
            assert got_n == py_n
            np.testing.assert_array_equal(got_l, py_l)

    def test_nms_keep(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            m = int(rng.integers(1, 40))
            x0 = rng.integers(0, 20, size=m)
            y0 = rng.integers(0, 20, size=m)
            boxes = np.stack(
                [x0, y0, x0 + rng.integers(1, 10, size=m),
                 y0 + rng.integers(1, 10, size=m)], axis=1
            ).astype(np.int64)
            threshold = float(rng.uniform(0.2, 0.8))
            np.testing.assert_array_equal(
                _accel.nms_keep(boxes, threshold),
                _accel.nms_keep_py(boxes, threshold),
            )


class TestAgainstOracles:
    def test_components_match_bfs(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            mask = rng.random((12, 15)) < 0.5
            got_l, got_n = _accel.connected_components(mask)
            want_l, want_n = bfs_components(mask)
            assert got_n == want_n
            np.testing.assert_array_equal(got_l, want_l)

    def test_sums_match_python_loop(self):
        rng = np.random.default_rng(6)
        labels = random_labels(rng, 9, 7, 5)
        values = rng.normal(size=(9, 7))
        want = np.zeros(5)
        for i in range(9):
            for j in range(7):
                want[labels[i, j]] += values[i, j]
        np.testing.assert_allclose(
            _accel.superpixel_sums(labels, values, 5), want, rtol=1e-12
        )


class TestEdgeCases:
    def test_empty_mask(self):
        labels, count = _accel.connected_components(np.zeros((4, 4), dtype=bool))
        assert count == 0
        np.testing.assert_array_equal(labels, -1)

    def test_full_mask_is_one_component(self):
        labels, count = _accel.connected_components(np.ones((4, 6), dtype=bool))
        assert count == 1
        np.testing.assert_array_equal(labels, 0)

    def test_single_box_kept(self):
        keep = _accel.nms_keep(np.array([[0, 0, 4, 4]], dtype=np.int64), 0.5)
        np.testing.assert_array_equal(keep, [True])


class TestEnvironmentFlag:
    def test_disable_flag_selects_fallbacks(self):
        code = (
            "import saldet._accel as a; "
            "print(a.USE_NUMBA, a.adjacency_matrix is a.adjacency_matrix_py)"
        )
        out = subprocess.run(
            [sys.executable, "-c", code],
            capture_output=True, text=True,
            env={"PATH": "/usr/bin:/bin", "SALDET_DISABLE_NUMBA": "1"},
        )
        assert out.returncode == 0, out.stderr
        assert out.stdout.split() == ["False", "True"]

    def test_default_build_dispatches_somewhere(self):
        assert _accel.USE_NUMBA == (
            _accel.NUMBA_AVAILABLE and not _accel.NUMBA_DISABLED
        )
