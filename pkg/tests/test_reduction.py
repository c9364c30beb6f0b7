from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pix2graph.errors import ValidationError
from pix2graph.reduction import Projection, fit, n_components


def _power_iteration_spectrum(x: np.ndarray, r: int, iters: int = 3000) -> np.ndarray:
    """Top-r eigenvalues of the standardized covariance by power iteration with deflation."""
    z = (x - x.mean(0)) / x.std(0)
    cov = z.T @ z / len(z)
    rng = np.random.default_rng(0)
    vals = []
    for _ in range(r):
        v = rng.normal(size=cov.shape[0])
        for _ in range(iters):
            v = cov @ v
            v /= np.linalg.norm(v)
        lam = float(v @ cov @ v)
        vals.append(lam)
        cov = cov - lam * np.outer(v, v)
    return np.array(vals)


def _low_rank(rng, n=400, d=27, rank=5, noise=1e-3):
    return rng.normal(size=(n, rank)) @ rng.normal(size=(rank, d)) + noise * rng.normal(size=(n, d))


class TestFit:
    def test_line_in_2d(self):
        t = np.linspace(-1, 1, 50)
        p = fit(np.stack([t, 2 * t + 1], 1))
        assert p.r == 1
        assert p.explained_fraction == pytest.approx(1.0, abs=1e-12)

    def test_cumulative_rule(self):
        assert n_components(np.array([9.0, 0.5, 0.5]), 0.95) == 2
        assert n_components(np.array([9.0, 0.5, 0.5]), 0.90) == 1
        assert n_components(np.array([9.0, 0.5, 0.5]), 1.0) == 3
        assert n_components(np.zeros(4), 0.95) == 1

    def test_power_iteration_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(500, 27)) @ rng.normal(size=(27, 27))
        p = fit(x, 0.95)
        oracle = _power_iteration_spectrum(x, p.r)
        assert p.explained_fraction == pytest.approx(oracle.sum() / 27.0, abs=1e-6)
        assert p.explained_fraction >= 0.95

    def test_errors(self):
        with pytest.raises(ValidationError):
            fit(np.zeros((1, 3)))
        with pytest.raises(ValidationError):
            fit(np.zeros((5, 3)), threshold=0.0)
        with pytest.raises(ValidationError):
            fit(np.zeros((5, 3)), threshold=1.5)

    def test_constant_column_floor(self):
        rng = np.random.default_rng(2)
        x = np.concatenate([rng.normal(size=(30, 3)), np.full((30, 1), 4.0)], 1)
        p = fit(x)
        assert p.scale[3] == pytest.approx(1e-8)
        assert np.isfinite(p.apply(x)).all()

    def test_sign_convention(self):
        rng = np.random.default_rng(3)
        p = fit(rng.normal(size=(100, 6)) @ rng.normal(size=(6, 6)), 1.0)
        for j in range(p.r):
            col = p.components[:, j]
            assert col[np.argmax(np.abs(col))] > 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 12), st.floats(0.5, 1.0))
    def test_orthonormal_and_threshold(self, seed, d, threshold):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(40, d)) @ rng.normal(size=(d, d))
        p = fit(x, threshold)
        assert p.r <= d
        assert np.allclose(p.components.T @ p.components, np.eye(p.r), atol=1e-8)
        assert p.r == d or p.explained_fraction >= threshold - 1e-12


class TestApply:
    def test_mean_row_maps_to_zero(self):
        x = _low_rank(np.random.default_rng(4))
        p = fit(x)
        assert np.allclose(p.apply(x.mean(0, keepdims=True)), 0, atol=1e-12)

    def test_reconstruct_on_span(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(200, 3)) @ rng.normal(size=(3, 10))
        p = fit(x, 0.999999)
        assert p.r == 3
        assert np.allclose(p.reconstruct(p.apply(x)), x, atol=1e-8)

    def test_dimension_mismatch(self):
        p = fit(np.random.default_rng(6).normal(size=(20, 4)))
        with pytest.raises(ValidationError):
            p.apply(np.zeros((2, 5)))

    def test_refit_keeps_r(self):
        # re-standardizing PCA scores whitens them, so r is stable while ceil(0.95 r) == r
        x = _low_rank(np.random.default_rng(7), rank=6, noise=0.05)
        p = fit(x, 0.95)
        assert p.r < 20
        assert fit(p.apply(x), 0.95).r == p.r

    def test_fold_smoke(self):
        rng = np.random.default_rng(8)
        train, test = _low_rank(rng), _low_rank(rng, n=50)
        p = fit(train, ids=["g1", "g2"])
        out = p.apply(test)
        assert out.shape == (50, p.r) and np.isfinite(out).all()
        assert p.fitted_ids == ["g1", "g2"]

    def test_json_roundtrip(self):
        p = fit(_low_rank(np.random.default_rng(9)), ids=["a"])
        q = Projection.from_dict(p.to_dict())
        x = np.random.default_rng(10).normal(size=(5, 27))
        assert np.array_equal(q.apply(x), p.apply(x)) and q.fitted_ids == ["a"]
