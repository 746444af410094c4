import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from krigwrap.backbone import DiffusionBackbone, gather_rows, random_walk_supports
from krigwrap.heads import FusionHead, MaskEncoder, ModulationHead, attention, encode_mask, fuse, modulate
from krigwrap.model import VARIANTS, ModelContext, build_model
from krigwrap.sampling import make_batch, sample_subgraph
from krigwrap.training import combine_losses, loss_auxiliary, loss_primary, make_context


def _graph(n, seed, B=2, t=5):
    g = torch.Generator().manual_seed(seed)
    A = torch.rand(B, n, n, generator=g, dtype=torch.float64)
    A = (A + A.transpose(1, 2)) / 2
    A = A * (A > 0.4)
    X = torch.randn(B, n, t, generator=g, dtype=torch.float64)
    M = (torch.rand(B, n, t, generator=g) > 0.3).double()
    return X * M, A, M


def _permute(P, X, A, M):
    return X[:, P], A[:, P][:, :, P], M[:, P]


class TestBackbone:
    def test_zero_input_identical_rows(self):
        torch.manual_seed(0)
        bb = DiffusionBackbone(5, 8).double()
        A = torch.ones(1, 4, 4, dtype=torch.float64)
        Z = bb(torch.zeros(1, 4, 5, dtype=torch.float64), A, None)
        assert torch.allclose(Z[0], Z[0, :1].expand(4, -1), atol=0)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(3, 9))
    def test_permutation_equivariance(self, seed, n):
        torch.manual_seed(seed)
        bb = DiffusionBackbone(5, 16, order=2).double()
        X, A, M = _graph(n, seed)
        P = torch.randperm(n)
        out = bb(*_permute(P, X, A, M))
        assert torch.allclose(out, bb(X, A, M)[:, P], atol=1e-5)

    def test_fd_gradient_six_nodes(self):
        torch.manual_seed(0)
        bb = DiffusionBackbone(4, 6, order=2).double()
        X, A, M = _graph(6, 1, B=1, t=4)
        bb.zero_grad()
        bb(X, A, M).sum().backward()
        eps = 1e-6
        for name, p in bb.named_parameters():
            flat = p.data.view(-1)
            for k in range(flat.numel()):
                old = flat[k].item()
                flat[k] = old + eps
                fp = bb(X, A, M).sum().item()
                flat[k] = old - eps
                fm = bb(X, A, M).sum().item()
                flat[k] = old
                fd = (fp - fm) / (2 * eps)
                g = p.grad.view(-1)[k].item()
                assert abs(fd - g) <= 1e-3 * max(abs(g), 1e-3), (name, k, fd, g)

    def test_supports_row_stochastic_and_isolated_nodes(self):
        A = torch.zeros(1, 3, 3, dtype=torch.float64)
        A[0, 0, 1] = A[0, 1, 0] = 1.0
        P_f, P_b = random_walk_supports(A)
        assert torch.allclose(P_f.sum(-1), torch.ones(1, 3, dtype=torch.float64))
        assert P_f[0, 2, 2] == 1.0

    def test_non_finite_input_rejected(self):
        bb = DiffusionBackbone(3, 4)
        with pytest.raises(ValueError):
            bb(torch.full((1, 2, 3), float("nan")), torch.eye(2)[None], None)


class TestMaskEncoder:
    def test_full_mask_finite_and_mask_consumed(self):
        torch.manual_seed(0)
        enc = MaskEncoder(5, 8).double()
        X, A, _ = _graph(6, 2)
        rows = torch.tensor([[5], [5]])
        H1 = encode_mask(enc, torch.ones_like(X), X, A, rows)
        H0 = encode_mask(enc, torch.zeros_like(X), X, A, rows)
        assert torch.isfinite(H1).all() and not torch.allclose(H0, H1)

    def test_non_target_permutation_invariance(self):
        torch.manual_seed(1)
        enc = MaskEncoder(5, 8).double()
        X, A, M = _graph(7, 3)
        rows = torch.tensor([[6], [6]])
        P = torch.cat([torch.randperm(6), torch.tensor([6])])
        assert torch.allclose(enc(M[:, P], X[:, P], A[:, P][:, :, P], rows), enc(M, X, A, rows), atol=1e-10)


class TestModulation:
    def _head(self, gamma=0.1):
        torch.manual_seed(0)
        return ModulationHead(4, 6, gamma=gamma).double()

    def test_gamma_zero_identity(self):
        Z, H = torch.randn(3, 1, 6, dtype=torch.float64), torch.randn(3, 1, 4, dtype=torch.float64)
        assert modulate(Z, H, self._head(0.0)) is Z
        assert torch.equal(modulate(Z, H, self._head(0.3), gamma=0.0), Z)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 100.0))
    def test_bound(self, seed, scale):
        g = torch.Generator().manual_seed(seed)
        Z = scale * torch.randn(4, 2, 6, generator=g, dtype=torch.float64)
        H = scale * torch.randn(4, 2, 4, generator=g, dtype=torch.float64)
        assert torch.all((modulate(Z, H, self._head()) - Z).abs() <= 0.1 * (Z.abs() + 1) + 1e-12)

    def test_affine_in_z(self):
        head = self._head()
        Z, H = torch.randn(2, 1, 6, dtype=torch.float64), torch.randn(2, 1, 4, dtype=torch.float64)
        alpha, _ = head.affine(H)
        assert torch.allclose(modulate(2 * Z, H, head) - modulate(Z, H, head), alpha * Z, atol=1e-14)

    def test_negative_gamma(self):
        with pytest.raises(ValueError):
            ModulationHead(4, 6, gamma=-0.1)


class TestFusion:
    def test_single_target_attention_is_value(self):
        g = torch.Generator().manual_seed(0)
        Q, K, V = (torch.randn(3, 1, d, generator=g, dtype=torch.float64) for d in (4, 4, 6))
        out, w = attention(Q, K, V)
        assert torch.equal(w, torch.ones_like(w)) and torch.equal(out, V)

    def test_rows_sum_to_one(self):
        g = torch.Generator().manual_seed(0)
        Q, K, V = (torch.randn(2, 4, d, generator=g, dtype=torch.float64) for d in (4, 4, 6))
        _, w = attention(Q, K, V)
        assert torch.allclose(w.sum(-1), torch.ones(2, 4, dtype=torch.float64), atol=1e-6)

    def test_identical_channels_symmetric(self):
        torch.manual_seed(0)
        head = FusionHead(4, 6).double()
        Z, H = torch.randn(2, 4, 6, dtype=torch.float64), torch.randn(2, 4, 4, dtype=torch.float64)
        _, (w, w_J) = fuse(head, Z, Z, Z, Z, H, H, return_attention=True)
        assert torch.equal(w, w_J)
        Zh, _ = attention(head.W_q(H), head.W_k(H), head.W_v(Z))
        Zh_J, _ = attention(head.W_q(H), head.W_k(H), head.W_v(Z))
        assert torch.equal(Zh, Zh_J)

    def test_shape_mismatch(self):
        head = FusionHead(4, 6)
        Z = torch.zeros(1, 1, 6)
        with pytest.raises(ValueError):
            fuse(head, Z, torch.zeros(1, 2, 6), Z, Z, torch.zeros(1, 1, 4), torch.zeros(1, 1, 4))


def _wrapped(view, feats, variant="full", seed=0, dtype=torch.float64, gamma=0.1):
    torch.manual_seed(seed)
    m = build_model(variant, 8, view.n_steps, feats.shape[1], hidden=8, d_m=6, gamma=gamma,
                    jigsaw_kw=dict(K_w=3, K_n=2, d_tau=6, d_w=6, d_o=6, d_n=6))
    return m.to(dtype)


def _batch(view, n=3, size=6, u=1, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    return make_batch([sample_subgraph(view, size, u, 8, "train", rng) for _ in range(n)], dtype)


class TestWrapper:
    def test_wo_jm_is_vanilla(self, micro):
        view, feats = micro
        a, b = _wrapped(view, feats, "wo_JM"), _wrapped(view, feats, "vanilla")
        batch = _batch(view)
        assert torch.equal(a(batch)["Y_hat"], b(batch)["Y_hat"])

    def test_variant_flags(self):
        assert not VARIANTS["wo_J"].use_jigsaw and VARIANTS["wo_J"].use_mask
        assert not VARIANTS["wo_M"].use_mask and not VARIANTS["wo_A"].use_attention
        assert not VARIANTS["wo_L"].use_aux_loss and not VARIANTS["wo_JM"].wrapped

    def test_shared_backbone_single_parameter_set(self, micro):
        view, feats = micro
        m = _wrapped(view, feats)
        names = [n for n, _ in m.named_parameters() if n.startswith("backbone.")]
        assert len(names) == len(list(m.backbone.parameters()))

    @pytest.mark.parametrize("variant", ["full", "wo_M", "wo_A"])
    def test_node_order_invariance(self, micro, variant):
        view, feats = micro
        model = _wrapped(view, feats, variant).eval()
        ctx = make_context(model, view, feats, 8, True)
        batch = _batch(view, n=2, size=7, u=2, seed=5)
        ref = model(batch, ctx)["Y_hat"]
        n = batch.X.shape[1]
        P = torch.cat([torch.randperm(n - 2), torch.tensor([n - 2, n - 1])])
        perm = type(batch)(batch.X[:, P], batch.A[:, P][:, :, P], batch.M[:, P], batch.Y, batch.Y_mask,
                           batch.target_rows, batch.node_ids[:, P], batch.window_start)
        assert torch.allclose(model(perm, ctx)["Y_hat"], ref, atol=1e-5)

    def test_end_to_end_finite_differences(self, micro):
        view, feats = micro
        model = _wrapped(view, feats, "full", seed=2, gamma=0.5)
        ctx = make_context(model, view, feats, 8, True)
        batch = _batch(view, n=2, size=6, seed=1)

        def loss():
            out = model(batch, ctx)
            l1 = loss_primary(out["Y_hat"], batch.Y, batch.Y_mask)
            l2, _ = loss_auxiliary(out["xhat"], batch.X, batch.M, out["replace_rows"])
            return combine_losses(l1, l2, 1.0)

        model.zero_grad()
        loss().backward()
        eps = 1e-6
        gen = torch.Generator().manual_seed(0)
        checked = 0
        for name, p in model.named_parameters():
            if p.grad is None:
                continue
            d = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            with torch.no_grad():
                p.add_(eps * d)
                fp = loss().item()
                p.sub_(2 * eps * d)
                fm = loss().item()
                p.add_(eps * d)
            fd = (fp - fm) / (2 * eps)
            an = float((p.grad * d).sum())
            assert abs(fd - an) <= 1e-3 * max(abs(an), 1e-6), (name, fd, an)
            checked += 1
        # backbone, both encoders, mask encoder, modulation and fusion all receive gradient
        prefixes = {n.split(".")[0] for n, p in model.named_parameters() if p.grad is not None}
        assert {"backbone", "jigsaw", "mask_encoder", "modulation", "fusion"} <= prefixes
        assert checked >= 20

    def test_zero_lambda_auxiliary_gradient_vanishes(self, micro):
        view, feats = micro
        model = _wrapped(view, feats, "full")
        ctx = make_context(model, view, feats, 8, True)
        batch = _batch(view)
        out = model(batch, ctx)
        l1 = loss_primary(out["Y_hat"], batch.Y, batch.Y_mask)
        l2, _ = loss_auxiliary(out["xhat"], batch.X, batch.M, out["replace_rows"])
        params = [p for p in model.jigsaw.parameters()]
        g_tot = torch.autograd.grad(combine_losses(l1, l2, 0.0), params, retain_graph=True, allow_unused=True)
        g_l1 = torch.autograd.grad(l1, params, retain_graph=True, allow_unused=True)
        for a, b in zip(g_tot, g_l1):
            assert (a is None and b is None) or torch.equal(a, b)
        assert any(g is not None and g.abs().sum() > 0 for g in g_l1)
