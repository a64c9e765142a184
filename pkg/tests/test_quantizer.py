"""Random-projection quantizer: assignments, noise, utilization, formats."""

import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birq.autodiff import Tensor
from birq.errors import FormatError
from birq.quantizer import (Codebook, assign_hard, assign_soft,
                            codebook_utilization, init_codebook,
                            init_projection, load_labels, project,
                            sample_gumbel, save_labels, soft_assign_graph)
from birq.seeding import ROLE_PROJ_ANCHOR, ROLE_PROJ_ENHANCE

RNG = np.random.default_rng(51)

EULER_MASCHERONI = 0.5772156649015329


def brute_force_nearest(u_cols: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Per-frame exhaustive nearest-code search, O(T*N*d) loops."""
    t = u_cols.shape[1]
    out = np.empty(t, dtype=np.int64)
    for j in range(t):
        best, best_d = 0, math.inf
        for n in range(entries.shape[0]):
            d = float(np.sum((u_cols[:, j] - entries[n]) ** 2))
            if d < best_d:
                best, best_d = n, d
        out[j] = best
    return out


class TestHardAssignment:
    def test_matches_brute_force_on_large_batch(self):
        cb = init_codebook(3, 16, 8)
        u = RNG.standard_normal((8, 1000))
        got = assign_hard(u, cb)
        want = brute_force_nearest(u, cb.entries)
        npt.assert_array_equal(got, want)

    def test_tie_breaks_to_smallest_index(self):
        cb = Codebook(np.array([[1.0, 0.0], [-1.0, 0.0]]), seed=0)
        u = np.array([[0.0, 0.0], [0.3, -2.0]])  # both frames equidistant
        npt.assert_array_equal(assign_hard(u, cb), [0, 0])

    def test_l2_normalized_variant(self):
        cb = init_codebook(5, 4, 3)
        u = RNG.standard_normal((3, 50)) * 10.0
        got = assign_hard(u, cb, l2_normalize=True)
        u_unit = u / np.linalg.norm(u, axis=0, keepdims=True)
        entries_unit = cb.entries / np.linalg.norm(cb.entries, axis=1,
                                                   keepdims=True)
        want = brute_force_nearest(u_unit, entries_unit)
        npt.assert_array_equal(got, want)

    def test_exact_code_vector_maps_to_its_index(self):
        cb = init_codebook(7, 6, 4)
        u = cb.entries.T.copy()
        npt.assert_array_equal(assign_hard(u, cb), np.arange(6))


class TestSoftAssignment:
    def test_rows_are_distributions(self):
        cb = init_codebook(2, 8, 4)
        u = RNG.standard_normal((4, 40))
        soft = assign_soft(u, cb, tau=0.5)
        assert soft.shape == (40, 8)
        assert np.all(soft >= 0)
        npt.assert_allclose(soft.sum(axis=1), 1.0, atol=1e-12)

    def test_noiseless_argmax_equals_hard(self):
        cb = init_codebook(11, 12, 6)
        u = RNG.standard_normal((6, 500))
        soft = assign_soft(u, cb, tau=0.5)
        npt.assert_array_equal(np.argmax(soft, axis=1), assign_hard(u, cb))

    def test_low_temperature_concentrates(self):
        # distance gap >= 0.1 at tau=1e-3 puts essentially all mass on the
        # winner
        cb = init_codebook(4, 8, 5)
        u = RNG.standard_normal((5, 300))
        dists = (np.sum(u.T ** 2, axis=1, keepdims=True)
                 - 2.0 * u.T @ cb.entries.T
                 + np.sum(cb.entries ** 2, axis=1))
        sorted_d = np.sort(dists, axis=1)
        gap_ok = (sorted_d[:, 1] - sorted_d[:, 0]) >= 0.1
        assert gap_ok.sum() > 100  # fixture sanity
        soft = assign_soft(u, cb, tau=1e-3)
        winner_mass = soft[np.arange(300), np.argmin(dists, axis=1)]
        assert np.all(winner_mass[gap_ok] >= 1.0 - 1e-6)

    def test_high_temperature_flattens(self):
        cb = init_codebook(4, 8, 5)
        u = RNG.standard_normal((5, 20))
        soft = assign_soft(u, cb, tau=1e6)
        npt.assert_allclose(soft, 1.0 / 8.0, atol=1e-4)

    def test_translation_invariance(self):
        # shifting frames and codes together leaves distances unchanged
        cb = init_codebook(9, 6, 3)
        u = RNG.standard_normal((3, 25))
        shift = RNG.standard_normal(3)
        cb2 = Codebook(cb.entries + shift, seed=0)
        a = assign_soft(u, cb, tau=0.7)
        b = assign_soft(u + shift[:, None], cb2, tau=0.7)
        npt.assert_allclose(a, b, atol=1e-9)

    def test_gumbel_noise_is_applied_to_scores(self):
        cb = init_codebook(13, 5, 4)
        u = RNG.standard_normal((4, 30))
        g = sample_gumbel(21, 30, 5)
        plain = assign_soft(u, cb, tau=0.5)
        noisy = assign_soft(u, cb, tau=0.5, gumbel=g)
        assert np.max(np.abs(plain - noisy)) > 1e-3


class TestSoftGraphGradient:
    def test_matches_finite_differences(self):
        cb = init_codebook(17, 5, 4)
        u0 = RNG.standard_normal((7, 4))
        g = sample_gumbel(3, 7, 5)
        w = RNG.standard_normal((7, 5))  # random linear functional

        def value(u_arr):
            t = Tensor(u_arr, requires_grad=True)
            out = soft_assign_graph(t, cb, 0.5, gumbel=g)
            return t, (out * Tensor(w)).sum()

        t, loss = value(u0.copy())
        loss.backward()
        analytic = t.grad.copy()
        h = 1e-5
        fd = np.zeros_like(u0)
        for i in range(u0.size):
            up = u0.copy()
            up.ravel()[i] += h
            dn = u0.copy()
            dn.ravel()[i] -= h
            fd.ravel()[i] = (value(up)[1].item() - value(dn)[1].item()) / (2 * h)
        err = np.abs(fd - analytic) / np.maximum.reduce(
            [np.abs(fd), np.abs(analytic), np.full_like(fd, 1e-8)])
        assert err.max() <= 1e-4

    def test_graph_values_match_numpy_path(self):
        cb = init_codebook(19, 6, 3)
        u = RNG.standard_normal((9, 3))
        g = sample_gumbel(5, 9, 6)
        graph = soft_assign_graph(Tensor(u), cb, 0.5, gumbel=g).data
        plain = assign_soft(u.T, cb, 0.5, gumbel=g)
        npt.assert_allclose(graph, plain, atol=1e-12)


class TestGumbel:
    def test_moments(self):
        g = sample_gumbel(0, 4000, 50)
        npt.assert_allclose(g.mean(), EULER_MASCHERONI, atol=5e-3)
        npt.assert_allclose(g.var(), math.pi ** 2 / 6.0, rtol=2e-2)

    def test_deterministic_per_key(self):
        npt.assert_array_equal(sample_gumbel((1, 2, 3), 10, 4),
                               sample_gumbel((1, 2, 3), 10, 4))
        a = sample_gumbel((1, 2, 3), 10, 4)
        b = sample_gumbel((1, 2, 4), 10, 4)
        assert np.max(np.abs(a - b)) > 0

    def test_all_finite_under_extreme_uniforms(self):
        # the clamp keeps -log(-log(q)) finite even for q near 0 or 1
        g = sample_gumbel(7, 100000, 8)
        assert np.all(np.isfinite(g))


class TestUtilization:
    def test_single_code_is_zero(self):
        assert codebook_utilization(np.zeros(50, dtype=np.int64), 8) == 0.0

    def test_uniform_is_one(self):
        labels = np.repeat(np.arange(8), 25)
        npt.assert_allclose(codebook_utilization(labels, 8), 1.0, atol=1e-12)

    def test_half_half_of_four_codes(self):
        labels = np.array([0] * 10 + [1] * 10)
        npt.assert_allclose(codebook_utilization(labels, 4), 0.5, atol=1e-12)

    @given(st.integers(min_value=2, max_value=32),
           st.integers(min_value=1, max_value=200),
           st.integers(min_value=0, max_value=2 ** 31))
    @settings(max_examples=100, deadline=None)
    def test_bounded_unit_interval(self, n, t, seed):
        labels = np.random.default_rng(seed).integers(0, n, size=t)
        u = codebook_utilization(labels, n)
        assert 0.0 <= u <= 1.0 + 1e-12


class TestInitializers:
    def test_codebook_deterministic_and_distinct_roles(self):
        a = init_codebook(5, 8, 4)
        b = init_codebook(5, 8, 4)
        npt.assert_array_equal(a.entries, b.entries)
        pa = init_projection(5, 10, 4, role=ROLE_PROJ_ANCHOR)
        pe = init_projection(5, 10, 4, role=ROLE_PROJ_ENHANCE)
        assert np.max(np.abs(pa.matrix - pe.matrix)) > 0

    def test_projection_scale(self):
        p = init_projection(0, 400, 300)
        npt.assert_allclose(p.matrix.std(), 1.0 / math.sqrt(400), rtol=0.02)

    def test_entries_are_read_only(self):
        cb = init_codebook(0, 4, 3)
        with pytest.raises(ValueError):
            cb.entries[0, 0] = 99.0
        p = init_projection(0, 5, 3)
        with pytest.raises(ValueError):
            p.matrix[0, 0] = 99.0

    def test_project_shape(self):
        p = init_projection(1, 6, 3)
        x = RNG.standard_normal((6, 11))
        assert project(p, x).shape == (3, 11)


class TestLabelsFormat:
    def test_hard_roundtrip(self, tmp_path):
        labels = RNG.integers(0, 16, size=47).astype(np.int64)
        path = tmp_path / "h.lab"
        save_labels(path, labels, 16)
        back, n = load_labels(path)
        assert n == 16
        npt.assert_array_equal(back, labels)

    def test_soft_roundtrip_bit_exact(self, tmp_path):
        soft = RNG.random((23, 8)).astype(np.float32)
        soft /= soft.sum(axis=1, keepdims=True)
        path = tmp_path / "s.lab"
        save_labels(path, soft, 8)
        back, n = load_labels(path)
        assert n == 8
        npt.assert_array_equal(back, soft.astype(np.float32))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.lab"
        save_labels(path, np.zeros(3, dtype=np.int64), 4)
        raw = bytearray(path.read_bytes())
        raw[3] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_labels(path)

    def test_out_of_range_index_rejected(self, tmp_path):
        path = tmp_path / "y.lab"
        save_labels(path, np.array([0, 1, 2], dtype=np.int64), 4)
        raw = bytearray(path.read_bytes())
        raw[-4:] = (2 ** 32 - 1).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_labels(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "z.lab"
        save_labels(path, RNG.random((5, 4)), 4)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError):
            load_labels(path)
