import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastgcl import autodiff as ad
from fastgcl.autodiff import Tape, Tensor, grad_check
from fastgcl.encoders import EncoderConfig, init_params, trainable
from fastgcl.graph import SbmSpec, from_edge_list, generate_motif_graphs, batch_graphs, generate_sbm
from fastgcl.objective import (
    ViewBundle,
    build_views,
    compute_edge_weights,
    init_weighter,
    norm_loss,
    random_edge_weights,
    ssl_loss,
    ssl_loss_from_sims,
    total_loss,
)


def small_graph(seed=0):
    return generate_sbm(SbmSpec((4, 4), 0.6, 0.2, feature_dim=3, seed=seed))


def constant_weighter(dim, bias):
    """Projection that maps every node to the same vector ``bias``."""
    w = init_weighter(dim, seed=0)
    w["W2"] = Tensor(np.zeros_like(w["W2"].data))
    w["b2"] = Tensor(np.asarray(bias, dtype=float)[None, :])
    return w


def bundle_from(a, p, n):
    return ViewBundle(Tensor(a), Tensor(p), Tensor(n), None)


class TestEdgeWeights:
    def test_zero_projection_gives_half(self):
        g = small_graph()
        e = compute_edge_weights(constant_weighter(4, np.zeros(4)), Tensor(np.ones((8, 4))), g)
        np.testing.assert_array_equal(e.data, 0.5)

    def test_known_norm_gives_three_quarters(self):
        g = small_graph()
        z = np.array([np.sqrt(np.log(3.0)), 0.0])
        e = compute_edge_weights(constant_weighter(2, z), Tensor(np.ones((8, 2))), g)
        np.testing.assert_allclose(e.data, 0.75, atol=1e-15)

    def test_symmetric_and_open_interval(self):
        for seed in range(5):
            g = small_graph(seed)
            w = init_weighter(3, seed=seed)
            h = Tensor(np.random.default_rng(seed).standard_normal((8, 3)) * 50)
            e = compute_edge_weights(w, h, g).data[:, 0]
            np.testing.assert_array_equal(e, e[g.mirror_index()])
            assert np.all((e > 0) & (e < 1))

    def test_row_mismatch(self):
        with pytest.raises(ValueError):
            compute_edge_weights(init_weighter(3), Tensor(np.ones((2, 3))), small_graph())

    def test_random_weights(self):
        g = small_graph()
        a, b = random_edge_weights(g, 3), random_edge_weights(g, 3)
        assert a.data.tobytes() == b.data.tobytes()
        e = a.data[:, 0]
        assert np.all((e > 0) & (e < 1))
        np.testing.assert_array_equal(e, e[g.mirror_index()])
        assert random_edge_weights(g, 4).data.tobytes() != a.data.tobytes()


class TestViews:
    def test_unit_ablation_positive_equals_anchor(self):
        g = small_graph()
        cfg = EncoderConfig("gcn", 2, 3, 5)
        b = build_views(cfg, init_params(cfg, 0), None, g, ablation="unit")
        np.testing.assert_array_equal(b.h_rho.data, b.h_alpha.data)

    @pytest.mark.parametrize("kind", ["gcn", "gin"])
    def test_edgeless_views_coincide(self, kind):
        g = from_edge_list(4, [], np.random.default_rng(0).random((4, 3)))
        cfg = EncoderConfig(kind, 2, 3, 5)
        b = build_views(cfg, init_params(cfg, 0), None, g, ablation="unit")
        np.testing.assert_array_equal(b.h_alpha.data, b.h_eta.data)
        np.testing.assert_array_equal(b.h_rho.data, b.h_eta.data)

    def test_missing_inputs(self):
        g = small_graph()
        cfg = EncoderConfig("gcn", 1, 3, 4)
        p = init_params(cfg, 0)
        with pytest.raises(ValueError):
            build_views(cfg, p, None, g, ablation="learned")
        with pytest.raises(ValueError):
            build_views(cfg, p, None, g, ablation="random")
        with pytest.raises(ValueError):
            build_views(cfg, p, None, g, ablation="dropout")


class TestContrastiveLoss:
    def test_zero_similarity(self):
        assert ssl_loss_from_sims([0.0], [0.0]) == pytest.approx(2 * np.log(2), abs=1e-12)
        assert ssl_loss_from_sims([0.0], [0.0]) == pytest.approx(1.386294, abs=1e-6)

    def test_ideal_similarity(self):
        want = 2 * np.log1p(np.exp(-1.0))
        assert ssl_loss_from_sims([1.0], [-1.0]) == pytest.approx(want, abs=1e-12)
        assert want == pytest.approx(0.626523, abs=1e-6)

    def test_tape_matches_scalar(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        b = bundle_from(a, a, -a)
        assert ssl_loss(b).item() == pytest.approx(0.626523, abs=1e-6)
        orth = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert ssl_loss(bundle_from(a, orth, orth)).item() == pytest.approx(1.386294, abs=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100.0))
    def test_scale_invariance(self, seed, scale):
        r = np.random.default_rng(seed)
        a, p, n = (r.standard_normal((5, 3)) for _ in range(3))
        base = ssl_loss(bundle_from(a, p, n)).item()
        assert ssl_loss(bundle_from(a * scale, p * scale, n * scale)).item() == pytest.approx(base, abs=1e-12)
        assert ssl_loss(bundle_from(a * 7.3, p * 7.3, n * 7.3)).item() == pytest.approx(base, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 4), st.integers(0, 2))
    def test_single_row_scale_invariance(self, seed, row, which):
        r = np.random.default_rng(seed)
        views = [r.standard_normal((5, 3)) for _ in range(3)]
        base = ssl_loss(bundle_from(*views)).item()
        views[which][row] *= 7.3
        assert ssl_loss(bundle_from(*views)).item() == pytest.approx(base, abs=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_bounds(self, seed):
        r = np.random.default_rng(seed)
        v = ssl_loss(bundle_from(*(r.standard_normal((6, 4)) for _ in range(3)))).item()
        lo = 2 * np.log1p(np.exp(-1.0))
        hi = 2 * np.log1p(np.exp(1.0))
        assert lo - 1e-12 <= v <= hi + 1e-12

    def test_graph_level_uses_readout(self):
        gs = generate_motif_graphs(4, 10, 4, seed=0)
        g = batch_graphs(gs)
        cfg = EncoderConfig("gin", 2, 1, 4, "relu")
        b = build_views(cfg, init_params(cfg, 0), None, g, ablation="unit")
        v = ssl_loss(b, "graph").item()
        assert np.isfinite(v)
        with pytest.raises(ValueError):
            ssl_loss(b, "edge")


class TestNormLoss:
    def test_known_values(self):
        assert norm_loss(Tensor(np.ones((4, 1)))).item() == pytest.approx(-np.log(2), abs=1e-12)
        assert norm_loss(Tensor(np.zeros((4, 1)))).item() == pytest.approx(-np.log1p(np.e), abs=1e-12)
        assert norm_loss(Tensor(np.zeros((4, 1)))).item() == pytest.approx(-1.313262, abs=1e-6)

    def test_gradient_sign_pushes_weights_down(self):
        # d(L_norm)/de = sigmoid(1 - e) / count > 0, so descent lowers every weight
        e0 = np.random.default_rng(0).uniform(0.05, 0.95, (6, 1))
        e = Tensor(e0, requires_grad=True)
        with Tape() as tape:
            loss = norm_loss(e)
        tape.backward(loss)
        g = tape.grad(e)
        np.testing.assert_allclose(g, 1 / (1 + np.exp(-(1 - e0))) / 6, atol=1e-15)
        assert np.all(g > 0)
        h = 1e-6
        fd = (norm_loss(Tensor(e0 + h)).item() - norm_loss(Tensor(e0 - h)).item()) / (2 * h)
        assert fd == pytest.approx(g.sum(), rel=1e-6)

    def test_empty(self):
        with pytest.raises(ValueError):
            norm_loss(Tensor(np.zeros((0, 1))))


class TestTotalLoss:
    def test_linear_in_lambda(self):
        g = small_graph()
        cfg = EncoderConfig("gcn", 2, 3, 4)
        b = build_views(cfg, init_params(cfg, 0), init_weighter(4, seed=1), g)
        l0, s0, n0 = total_loss(b, "node", 0.0)
        assert l0.item() == s0.item()
        for lam in (0.01, 0.5, 3.0):
            l, s, n = total_loss(b, "node", lam)
            assert l.item() == pytest.approx(s.item() + lam * n.item(), abs=1e-14)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            total_loss(bundle_from(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2))), "node", -1.0)

    def test_no_edges_means_no_regularizer(self):
        g = from_edge_list(3, [], np.ones((3, 2)))
        cfg = EncoderConfig("gcn", 1, 2, 3)
        b = build_views(cfg, init_params(cfg, 0), init_weighter(3), g)
        l, s, n = total_loss(b, "node", 1.0)
        assert n is None and l is s


class TestFullGradient:
    @pytest.mark.parametrize("kind,level", [("gcn", "node"), ("gin", "node"), ("gin", "graph")])
    def test_grad_check(self, kind, level):
        if level == "graph":
            g = batch_graphs(generate_motif_graphs(2, 6, 3, seed=1))
        else:
            g = small_graph(2)
        # prelu keeps every row nonzero; cosine is not differentiable at a zero vector
        cfg = EncoderConfig(kind, 2, g.num_features, 4, "prelu")
        p = init_params(cfg, 3)
        w = init_weighter(4, seed=4)
        params = [p[n] for n in trainable(cfg, p)] + list(w.values())
        err = grad_check(lambda: total_loss(build_views(cfg, p, w, g), level, 0.5)[0], params)
        assert err < 1e-4

    def test_weighter_receives_gradient_and_anchor_path_counts(self):
        g = small_graph(1)
        cfg = EncoderConfig("gcn", 2, 3, 4)
        p = init_params(cfg, 0).require_grad()
        w = init_weighter(4, seed=1).require_grad()
        with Tape() as tape:
            loss = total_loss(build_views(cfg, p, w, g), "node", 0.5)[0]
        tape.backward(loss)
        assert np.any(tape.grad(w["W1"]) != 0)
        with Tape() as tape2:
            b = build_views(cfg, p, None, g, ablation="random",
                            fixed_weights=Tensor(compute_edge_weights(w, build_views(cfg, p, w, g).h_alpha, g).data))
            loss2 = total_loss(b, "node", 0.5)[0]
        tape2.backward(loss2)
        assert loss.item() == pytest.approx(loss2.item(), abs=1e-14)
        # detaching the weights changes the encoder gradient: the path through e is live
        assert not np.allclose(tape.grad(p["layer0.W"]), tape2.grad(p["layer0.W"]))

    def test_ops_leave_forward_values(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = ad.sum_all(ad.mul(x, x))
        tape.backward(y)
        assert np.all(x.data == 1.0)
