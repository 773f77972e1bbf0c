"""Loss components: closed forms, loop-oracle equivalence, gradient probes."""

import math

import numpy as np
import pytest

from naive_losses import (
    naive_cross_consistency,
    naive_cross_prediction,
    naive_info_nce,
    naive_reconstruction,
)
from xsmae import tensor as T
from xsmae.augment import ScaledPair
from xsmae.errors import ConfigError, ConsistencyError, DegenerateInputError, ShapeError
from xsmae.gradcheck import gradient_check
from xsmae.losses import (
    ContrastiveBatch,
    Predictor,
    ProjectionHead,
    cross_consistency_loss,
    cross_prediction_loss,
    info_nce,
    pool_encoder_tokens,
    reconstruction_loss,
    total_loss,
)
from xsmae.tensor import Tensor
from xsmae.vit import MaskSpec


def make_mask(num_patches, ratio, seed=0):
    rng = np.random.default_rng(seed)
    n_masked = int(round(ratio * num_patches))
    perm = rng.permutation(num_patches)
    return MaskSpec(visible_idx=np.sort(perm[n_masked:]), masked_idx=np.sort(perm[:n_masked]),
                    mask_ratio=ratio)


def make_predictor(rng, dim, scale=0.4):
    return Predictor(
        w1=Tensor(rng.standard_normal((dim, 2 * dim)) * scale, requires_grad=True),
        b1=Tensor(np.zeros(2 * dim), requires_grad=True),
        w2=Tensor(rng.standard_normal((2 * dim, dim)) * scale, requires_grad=True),
        b2=Tensor(np.zeros(dim), requires_grad=True),
    )


class TestInfoNce:
    def test_single_candidate_positive_gives_zero(self):
        anchors = Tensor([[1.0, 2.0]])
        cands = Tensor([[0.5, -0.3]])
        assert info_nce(0, anchors, cands, 0, 1.0).item() == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_negatives_closed_form(self):
        anchors = Tensor([[1.0, 0.0, 0.0]])
        cands = Tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        expected = math.log(1.0 + 2.0 / math.e)
        assert info_nce(0, anchors, cands, 0, 1.0).item() == pytest.approx(expected, abs=1e-9)

    def test_candidate_scaling_invariance(self):
        rng = np.random.default_rng(0)
        anchors = Tensor(rng.standard_normal((1, 4)))
        base = rng.standard_normal((5, 4))
        a = info_nce(0, anchors, Tensor(base), 2, 0.5).item()
        scaled = base.copy()
        scaled[3] *= 17.0
        b = info_nce(0, anchors, Tensor(scaled), 2, 0.5).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_strictly_positive_with_negatives(self):
        rng = np.random.default_rng(1)
        anchors = Tensor(rng.standard_normal((2, 4)))
        cands = Tensor(rng.standard_normal((6, 4)))
        assert info_nce(1, anchors, cands, 3, 0.07).item() > 0.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        anchors = rng.standard_normal((3, 5))
        cands = rng.standard_normal((7, 5))
        for k in range(3):
            got = info_nce(k, Tensor(anchors), Tensor(cands), k + 2, 0.3).item()
            want = naive_info_nce(anchors[k], list(cands), k + 2, 0.3)
            assert got == pytest.approx(want, abs=1e-10)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        inputs = {"anchors": Tensor(rng.standard_normal((2, 4)), requires_grad=True),
                  "cands": Tensor(rng.standard_normal((4, 4)), requires_grad=True)}
        rep = gradient_check(lambda p: info_nce(0, p["anchors"], p["cands"], 1, 0.5), inputs)
        assert rep.max_rel_err < 1e-6

    def test_nonpositive_temperature_rejected(self):
        a = Tensor([[1.0, 0.0]])
        with pytest.raises(ConfigError):
            info_nce(0, a, a, 0, 0.0)

    def test_zero_norm_rows_rejected(self):
        anchors = Tensor([[1.0, 0.0]])
        with pytest.raises(DegenerateInputError):
            info_nce(0, anchors, Tensor([[0.0, 0.0], [1.0, 1.0]]), 0, 1.0)

    def test_out_of_range_indices_rejected(self):
        a = Tensor([[1.0, 0.0]])
        with pytest.raises(ConfigError):
            info_nce(0, a, a, 5, 1.0)
        with pytest.raises(ConfigError):
            info_nce(2, a, a, 0, 1.0)


class TestCrossConsistency:
    def batch(self, n=4, d=3, seed=0, tau=0.2):
        rng = np.random.default_rng(seed)
        return ContrastiveBatch(z_l=Tensor(rng.standard_normal((n, d)), requires_grad=True),
                                z_h=Tensor(rng.standard_normal((n, d)), requires_grad=True),
                                temperature=tau)

    def test_symmetric_under_branch_swap(self):
        b = self.batch()
        swapped = ContrastiveBatch(z_l=b.z_h, z_h=b.z_l, temperature=b.temperature)
        assert cross_consistency_loss(b).item() == pytest.approx(
            cross_consistency_loss(swapped).item(), abs=1e-12)

    def test_single_pair_with_only_the_positive_is_zero(self):
        b = ContrastiveBatch(z_l=Tensor([[1.0, 2.0]]), z_h=Tensor([[0.3, -0.7]]), temperature=0.5)
        assert cross_consistency_loss(b, "all").item() == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("mode,include_anchor", [
        ("all", False), ("all", True), ("other_scale", False), ("off", False),
    ])
    def test_matches_loop_oracle(self, mode, include_anchor):
        b = self.batch(n=4, d=3, seed=7)
        got = cross_consistency_loss(b, mode, include_anchor=include_anchor).item()
        want = naive_cross_consistency(b.z_l.data, b.z_h.data, b.temperature,
                                       mode=mode, include_anchor=include_anchor)
        assert got == pytest.approx(want, abs=1e-10)

    def test_invariant_under_common_batch_permutation(self):
        b = self.batch(n=5, d=4, seed=9)
        perm = np.random.default_rng(1).permutation(5)
        permuted = ContrastiveBatch(z_l=Tensor(b.z_l.data[perm]), z_h=Tensor(b.z_h.data[perm]),
                                    temperature=b.temperature)
        for mode in ("all", "other_scale", "off"):
            assert cross_consistency_loss(b, mode).item() == pytest.approx(
                cross_consistency_loss(permuted, mode).item(), abs=1e-10)

    def test_nonnegative(self):
        for seed in range(5):
            b = self.batch(seed=seed)
            assert cross_consistency_loss(b).item() >= 0.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        inputs = {"zl": Tensor(rng.standard_normal((3, 4)), requires_grad=True),
                  "zh": Tensor(rng.standard_normal((3, 4)), requires_grad=True)}
        rep = gradient_check(
            lambda p: cross_consistency_loss(
                ContrastiveBatch(z_l=p["zl"], z_h=p["zh"], temperature=0.3)),
            inputs,
        )
        assert rep.max_rel_err < 1e-4

    def test_invalid_mode_rejected(self):
        with pytest.raises(ConfigError):
            cross_consistency_loss(self.batch(), "everything")

    def test_mismatched_branches_rejected(self):
        with pytest.raises(ShapeError):
            ContrastiveBatch(z_l=Tensor(np.ones((2, 3))), z_h=Tensor(np.ones((3, 3))))


class TestCrossPrediction:
    def test_identity_predictor_on_equal_branches_is_zero(self):
        # gelu(x + 20) == x + 20 exactly for bounded x (the error function
        # saturates), so these weights realize the identity map
        d = 4
        pred = Predictor(w1=Tensor(np.vstack([np.eye(d), np.zeros((d, d))]).T.copy()),
                         b1=Tensor(np.full(2 * d, 20.0)),
                         w2=Tensor(np.vstack([np.eye(d), np.zeros((d, d))])),
                         b2=Tensor(np.full(d, -20.0)))
        rng = np.random.default_rng(0)
        tokens = Tensor(rng.uniform(-3, 3, size=(2, 5, d)))
        loss = cross_prediction_loss(tokens, Tensor(tokens.data.copy()), pred)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_constant_offset_costs_its_square(self):
        rng = np.random.default_rng(1)
        pred = make_predictor(rng, 3)
        f_dl = Tensor(rng.standard_normal((2, 4, 3)))
        eps = 0.3
        f_dh = Tensor(pred(f_dl).data + eps)
        assert cross_prediction_loss(f_dl, f_dh, pred).item() == pytest.approx(eps ** 2, abs=1e-12)

    def test_stop_gradient_controls_target_gradient(self):
        rng = np.random.default_rng(2)
        pred = make_predictor(rng, 3)
        f_dl = Tensor(rng.standard_normal((1, 4, 3)), requires_grad=True)
        f_dh = Tensor(rng.standard_normal((1, 4, 3)), requires_grad=True)
        cross_prediction_loss(f_dl, f_dh, pred, stop_grad_target=True).backward()
        assert f_dh.grad is None
        assert np.abs(f_dl.grad).max() > 0
        f_dh.zero_grad()
        cross_prediction_loss(f_dl, f_dh, pred, stop_grad_target=False).backward()
        assert np.abs(f_dh.grad).max() > 0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        pred = make_predictor(rng, 5)
        f_dl = rng.standard_normal((3, 6, 5))
        f_dh = rng.standard_normal((3, 6, 5))
        got = cross_prediction_loss(Tensor(f_dl), Tensor(f_dh), pred).item()
        want = naive_cross_prediction(f_dl, f_dh, pred.w1.data, pred.b1.data,
                                      pred.w2.data, pred.b2.data)
        assert got == pytest.approx(want, abs=1e-10)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        pred = make_predictor(rng, 3)
        inputs = {"f_dl": Tensor(rng.standard_normal((1, 3, 3)), requires_grad=True),
                  "w1": pred.w1, "b1": pred.b1, "w2": pred.w2, "b2": pred.b2}
        f_dh = Tensor(rng.standard_normal((1, 3, 3)))
        rep = gradient_check(
            lambda p: cross_prediction_loss(
                p["f_dl"], f_dh,
                Predictor(w1=p["w1"], b1=p["b1"], w2=p["w2"], b2=p["b2"])),
            inputs,
        )
        assert rep.max_rel_err < 1e-4

    def test_shape_mismatch_rejected(self):
        pred = make_predictor(np.random.default_rng(0), 3)
        with pytest.raises(ConsistencyError):
            cross_prediction_loss(Tensor(np.ones((1, 4, 3))), Tensor(np.ones((1, 5, 3))), pred)


def batched_pair(rng, b=2, size=8):
    return ScaledPair(p_h=rng.random((b, size, size, 1)), p_l=rng.random((b, size, size, 1)),
                      r_h=1.0, r_l=0.5, g_h=1.0, g_l=2.0)


class TestReconstruction:
    def test_perfect_reconstruction_is_zero(self):
        rng = np.random.default_rng(0)
        pair = batched_pair(rng)
        specs = (make_mask(4, 0.5, 1), make_mask(4, 0.5, 2))
        loss = reconstruction_loss(pair, Tensor(pair.p_l.copy()), Tensor(pair.p_h.copy()),
                                   specs, patch_size=4)
        assert loss.item() == 0.0

    def test_constant_offset_costs_square_per_branch(self):
        rng = np.random.default_rng(1)
        pair = batched_pair(rng)
        specs = (make_mask(4, 0.5, 1), make_mask(4, 0.5, 2))
        c = 0.2
        loss = reconstruction_loss(pair, Tensor(pair.p_l + c), Tensor(pair.p_h + c),
                                   specs, patch_size=4)
        assert loss.item() == pytest.approx(2 * c * c, abs=1e-12)

    def test_empty_mask_contributes_zero(self):
        rng = np.random.default_rng(2)
        pair = batched_pair(rng)
        specs = (make_mask(4, 0.0), make_mask(4, 0.0))
        loss = reconstruction_loss(pair, Tensor(rng.random(pair.p_l.shape)),
                                   Tensor(rng.random(pair.p_h.shape)), specs, patch_size=4)
        assert loss.item() == 0.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        pair = batched_pair(rng, b=3, size=8)
        specs = (make_mask(4, 0.5, 5), make_mask(4, 0.75, 6))
        recon_l = rng.random(pair.p_l.shape)
        recon_h = rng.random(pair.p_h.shape)
        for masked_only in (True, False):
            got = reconstruction_loss(pair, Tensor(recon_l), Tensor(recon_h), specs,
                                      patch_size=4, masked_only=masked_only).item()
            want = naive_reconstruction(pair.p_l, recon_l, specs[0].masked_idx,
                                        pair.p_h, recon_h, specs[1].masked_idx,
                                        patch_size=4, masked_only=masked_only)
            assert got == pytest.approx(want, abs=1e-10)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        pair = batched_pair(rng, b=1, size=8)
        specs = (make_mask(4, 0.5, 1), make_mask(4, 0.5, 2))
        inputs = {"rl": Tensor(rng.random(pair.p_l.shape), requires_grad=True),
                  "rh": Tensor(rng.random(pair.p_h.shape), requires_grad=True)}
        rep = gradient_check(
            lambda p: reconstruction_loss(pair, p["rl"], p["rh"], specs, patch_size=4),
            inputs,
        )
        assert rep.max_rel_err < 1e-4


class TestTotalLoss:
    def test_unit_weight_sum(self):
        report = total_loss(Tensor(0.5), Tensor(0.25), Tensor(0.25))
        assert report.total == 1.0
        assert (report.l_cc, report.l_cp, report.l_re) == (0.5, 0.25, 0.25)
        assert report.cc_enabled and report.cp_enabled and report.re_enabled

    def test_reconstruction_only_total_is_that_component(self):
        report = total_loss(l_re=Tensor(0.37))
        assert report.total == 0.37
        assert report.l_re == 0.37 and not report.cc_enabled and not report.cp_enabled

    def test_contrastive_only_configuration(self):
        report = total_loss(l_cc=Tensor(0.2), l_cp=Tensor(0.1))
        assert report.total == pytest.approx(0.3, abs=1e-12)
        assert not report.re_enabled

    def test_all_disabled_rejected(self):
        with pytest.raises(ConfigError):
            total_loss()

    def test_total_tensor_carries_gradients(self):
        x = Tensor([0.5], requires_grad=True)
        report = total_loss(l_cc=(x * x).sum(), l_re=(x * 3.0).sum())
        report.total_tensor.backward()
        np.testing.assert_allclose(x.grad, [4.0])


class TestPooling:
    def test_cls_mode_takes_first_token(self):
        rng = np.random.default_rng(0)
        f_e = Tensor(rng.standard_normal((2, 5, 3)))
        out = pool_encoder_tokens(f_e, use_cls_token=True, mode="cls")
        np.testing.assert_array_equal(out.data, f_e.data[:, 0, :])

    def test_mean_mode_averages_patch_tokens_only(self):
        rng = np.random.default_rng(1)
        f_e = Tensor(rng.standard_normal((2, 5, 3)))
        out = pool_encoder_tokens(f_e, use_cls_token=True, mode="mean")
        np.testing.assert_allclose(out.data, f_e.data[:, 1:, :].mean(axis=1), atol=1e-12)

    def test_mean_mode_without_cls(self):
        rng = np.random.default_rng(2)
        f_e = Tensor(rng.standard_normal((2, 4, 3)))
        out = pool_encoder_tokens(f_e, use_cls_token=False, mode="mean")
        np.testing.assert_allclose(out.data, f_e.data.mean(axis=1), atol=1e-12)

    def test_cls_mode_requires_cls_token(self):
        with pytest.raises(ConfigError):
            pool_encoder_tokens(Tensor(np.ones((1, 4, 3))), use_cls_token=False, mode="cls")
