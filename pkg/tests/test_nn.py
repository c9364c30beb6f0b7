from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from pix2graph.errors import TrainingError, ValidationError
from pix2graph.models import OcgtlConfig, OcgtlModel, semi_ocgtl_loss
from pix2graph.nn import AdamState, GinParams, GraphBatch, Tensor, adam_step, gin_forward, gradients
from pix2graph.nn.tensor import exp, log, norm, normalize, reciprocal, relu, spmm, stack


def _identity_params(d: int, n_layers: int = 1) -> GinParams:
    layers = []
    for li in range(n_layers):
        layers.append({
            "w1": Tensor(np.eye(d), requires_grad=True), "b1": Tensor(np.zeros(d), requires_grad=True),
            "w2": Tensor(np.eye(d), requires_grad=True), "b2": Tensor(np.zeros(d), requires_grad=True),
        })
    return GinParams(layers, [0.0] * n_layers)


def _random_graph(rng, n, d):
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.4]
    return np.array(pairs, dtype=np.int64).reshape(-1, 2), rng.normal(size=(n, d))


class TestTensor:
    def test_square_norm_gradient(self):
        w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        (w * w).sum().backward()
        assert np.array_equal(w.grad, 2 * w.data)

    def test_ufunc_rejected(self):
        with pytest.raises(TypeError):
            np.exp(Tensor(np.ones(2)))

    def test_unused_parameter_zero(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        ga, gb = gradients((a * 2.0).sum(), [a, b])
        assert np.array_equal(gb, np.zeros(3)) and np.array_equal(ga, np.full(3, 2.0))

    def test_broadcast_gradient(self):
        a = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        ((a * b) + b).sum().backward()
        assert np.array_equal(b.grad, np.full(3, 8.0))

    def test_primitive_finite_differences(self):
        x0 = np.random.default_rng(0).uniform(0.5, 2.0, size=(3, 4))
        m = sp.random(5, 3, density=0.5, random_state=1, format="csr")
        fns = [
            lambda x: exp(x).sum(),
            lambda x: log(x).sum(),
            lambda x: reciprocal(x).sum(),
            lambda x: (norm(x, axis=1) * np.arange(1.0, 4.0)).sum(),
            lambda x: (spmm(m, x) ** 2).sum(),
            lambda x: (stack([x, x * 2.0], axis=1) ** 3).mean(),
            lambda x: relu(x - 1.0).sum(),
        ]
        for f in fns:
            x = Tensor(x0.copy(), requires_grad=True)
            f(x).backward()
            num = np.zeros_like(x0)
            for idx in np.ndindex(x0.shape):
                e = np.zeros_like(x0)
                e[idx] = 1e-6
                num[idx] = (f(Tensor(x0 + e)).item() - f(Tensor(x0 - e)).item()) / 2e-6
            assert np.allclose(x.grad, num, rtol=1e-6, atol=1e-6)

    def test_normalize_gradient(self):
        rng = np.random.default_rng(2)
        x0, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        x = Tensor(x0, requires_grad=True)
        (normalize(x) * w).sum().backward()
        num = np.zeros_like(x0)
        for idx in np.ndindex(x0.shape):
            e = np.zeros_like(x0)
            e[idx] = 1e-6
            f = lambda v: ((v / np.linalg.norm(v, axis=-1, keepdims=True)) * w).sum()  # noqa: E731
            num[idx] = (f(x0 + e) - f(x0 - e)) / 2e-6
        assert np.allclose(x.grad, num, rtol=1e-6, atol=1e-8)

    def test_normalize_zero_vector(self):
        x = Tensor(np.zeros((1, 3)), requires_grad=True)
        out = normalize(x)
        out.sum().backward()
        assert np.array_equal(out.data, np.zeros((1, 3))) and np.array_equal(x.grad, np.zeros((1, 3)))


class TestGin:
    def test_single_node_identity(self):
        x = np.array([[0.5, 2.0, 1.5]])
        b = GraphBatch.from_graphs([(np.zeros((0, 2)), x)])
        nodes, graph = gin_forward(b, _identity_params(3, 2))
        assert np.allclose(nodes.data, x) and np.allclose(graph.data, x)

    def test_two_nodes_one_layer(self):
        b = GraphBatch.from_graphs([(np.array([[0, 1]]), np.array([[1.0], [2.0]]))])
        nodes, graph = gin_forward(b, _identity_params(1, 1))
        assert np.allclose(nodes.data, [[3.0], [3.0]]) and np.allclose(graph.data, [[6.0]])

    def test_dimension_mismatch(self):
        b = GraphBatch.from_graphs([(np.zeros((0, 2)), np.ones((2, 4)))])
        with pytest.raises(ValidationError):
            gin_forward(b, GinParams.init(3, 0, 0))

    def test_init_shapes_and_determinism(self):
        p = GinParams.init(27, seed=42, index=3)
        shapes = [t.shape for t in p.parameters()]
        assert shapes == [(27, 16), (16,), (16, 16), (16,), (16, 16), (16,), (16, 16), (16,)]
        q = GinParams.init(27, seed=42, index=3)
        assert all(np.array_equal(a.data, b.data) for a, b in zip(p.parameters(), q.parameters()))
        r = GinParams.init(27, seed=42, index=4)
        assert not np.array_equal(p.parameters()[0].data, r.parameters()[0].data)
        bound = np.sqrt(6 / (27 + 16))
        assert np.abs(p.parameters()[0].data).max() <= bound
        p.validate()

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        params = GinParams.init(4, seed=1, index=0)
        for layer in params.weights:
            for k in ("b1", "b2"):
                layer[k].data[...] = rng.normal(size=layer[k].shape)
        for _ in range(100):
            n = int(rng.integers(1, 12))
            edges, x = _random_graph(rng, n, 4)
            perm = rng.permutation(n)
            inv = np.argsort(perm)
            nodes, graph = gin_forward(GraphBatch.from_graphs([(edges, x)]), params)
            pedges = inv[edges] if len(edges) else edges
            pnodes, pgraph = gin_forward(GraphBatch.from_graphs([(pedges, x[perm])]), params)
            assert np.allclose(pnodes.data, nodes.data[perm], atol=1e-6)
            assert np.allclose(pgraph.data, graph.data, atol=1e-6)

    def test_batch_equals_individual(self):
        rng = np.random.default_rng(1)
        params = GinParams.init(3, seed=2, index=0)
        items = [_random_graph(rng, n, 3) for n in (3, 5, 1)]
        together = gin_forward(GraphBatch.from_graphs(items), params)[1].data
        apart = np.concatenate([gin_forward(GraphBatch.from_graphs([it]), params)[1].data for it in items])
        assert np.allclose(together, apart, atol=1e-12)


def _randomize(model: OcgtlModel, rng) -> None:
    # move every parameter, biases included, away from the zero-bias init
    for p in model.parameters():
        p.data[...] = rng.normal(scale=0.5, size=p.shape)


class TestGradientCheck:
    @pytest.mark.parametrize("labels", [[1], [1, -1, 0]])
    def test_full_objective(self, labels):
        rng = np.random.default_rng(3)
        items = [_random_graph(rng, 5, 4) for _ in labels]
        cfg = OcgtlConfig(dtype="float64")
        model = OcgtlModel.init(4, cfg)
        _randomize(model, rng)
        batch = GraphBatch.from_graphs(items)
        y = np.array(labels)

        def loss_value() -> Tensor:
            return semi_ocgtl_loss(model.embed(batch), model.c, y, cfg.tau).mean()

        params = model.parameters()
        grads = gradients(loss_value(), params)
        f0 = loss_value().item()
        h = 1e-5
        checked = skipped = 0
        for p, g in zip(params, grads):
            num = np.zeros_like(p.data)
            keep = np.ones(p.shape, bool)
            for idx in np.ndindex(p.shape):
                orig = p.data[idx]
                p.data[idx] = orig + h
                up = loss_value().item()
                p.data[idx] = orig - h
                down = loss_value().item()
                p.data[idx] = orig
                num[idx] = (up - down) / (2 * h)
                # one-sided slopes disagree only when the step crosses a ReLU kink
                fwd, bwd = (up - f0) / h, (f0 - down) / h
                keep[idx] = abs(fwd - bwd) <= 1e-2 * (1.0 + abs(num[idx]))
            checked += int(keep.sum())
            skipped += int((~keep).sum())
            if keep.any():
                rel = np.abs(g - num)[keep].max() / max(np.abs(num[keep]).max(), 1e-8)
                assert rel < 1e-4, p.name
        assert skipped <= 0.01 * (checked + skipped)


class TestAdam:
    def test_first_step(self):
        p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        adam_step([p], [np.array([0.3, -5.0])], AdamState(lr=1e-3))
        assert np.allclose(p.data, [1.0 - 1e-3, -1.0 + 1e-3], atol=1e-10)

    def test_zero_gradient(self):
        p = Tensor(np.array([0.7, 0.2]), requires_grad=True)
        st_ = AdamState()
        adam_step([p], [np.zeros(2)], st_)
        assert np.array_equal(p.data, [0.7, 0.2]) and st_.t == 1

    def test_non_finite_raises(self):
        p = Tensor(np.ones(2), requires_grad=True, name="gin0.l0.w1")
        with pytest.raises(TrainingError, match="gin0.l0.w1"):
            adam_step([p], [np.array([np.nan, 0.0])], AdamState())

    def test_state_roundtrip(self):
        p = Tensor(np.ones(3), requires_grad=True)
        s = AdamState()
        adam_step([p], [np.arange(3.0)], s)
        s2 = AdamState.from_dict(s.to_dict())
        assert s2.t == 1 and all(np.array_equal(a, b) for a, b in zip(s.m, s2.m))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-4, 1e3), st.floats(1e-5, 1e-1))
    def test_first_step_magnitude(self, g, lr):
        p = Tensor(np.zeros(1), requires_grad=True)
        adam_step([p], [np.array([g])], AdamState(lr=lr))
        assert p.data[0] == pytest.approx(-lr, rel=1e-4)
