import math

import numpy as np
import pytest
import torch
from torch import nn

from dualsed.exceptions import ConfigurationError
from dualsed.features import AugmentationDraw
from dualsed.model import PredictionPair
from dualsed.semisup import (
    LossBreakdown,
    bce_loss,
    composite_loss,
    ema_update,
    ict_loss,
    make_teacher,
    mt_loss,
)


def _pair(rng_seed=0, b=3, t=8, c=2):
    g = torch.Generator().manual_seed(rng_seed)
    return PredictionPair(
        strong=torch.rand(b, t, c, generator=g),
        weak=torch.rand(b, c, generator=g),
    )


class TestTeacher:
    def _model(self, seed=0):
        torch.manual_seed(seed)
        return nn.Sequential(nn.Linear(4, 8), nn.ReLU(), nn.Linear(8, 2))

    def test_make_teacher_detached_copy(self):
        student = self._model()
        teacher = make_teacher(student)
        for sp, tp in zip(student.parameters(), teacher.parameters()):
            assert torch.equal(sp, tp)
            assert not tp.requires_grad

    def test_ema_decay_zero_copies_student(self):
        student, teacher = self._model(1), make_teacher(self._model(2))
        ema_update(student, teacher, 0.0)
        for sp, tp in zip(student.parameters(), teacher.parameters()):
            assert torch.equal(sp, tp)

    def test_ema_decay_one_freezes_teacher(self):
        student, teacher = self._model(1), make_teacher(self._model(2))
        before = [tp.clone() for tp in teacher.parameters()]
        ema_update(student, teacher, 1.0)
        for tp, b in zip(teacher.parameters(), before):
            assert torch.equal(tp, b)

    def test_ema_geometric_convergence(self):
        student, teacher = self._model(1).double(), make_teacher(self._model(2).double())
        decay, k = 0.999, 50
        gap0 = [
            (tp - sp).double() for sp, tp in zip(student.parameters(), teacher.parameters())
        ]
        for _ in range(k):
            ema_update(student, teacher, decay)
        for (sp, tp), g0 in zip(zip(student.parameters(), teacher.parameters()), gap0):
            gap = (tp - sp).double()
            assert torch.allclose(gap, g0 * decay**k, rtol=1e-6, atol=1e-10)

    def test_shape_mismatch_rejected(self):
        student = self._model(1)
        other = nn.Sequential(nn.Linear(4, 6), nn.ReLU(), nn.Linear(6, 2))
        with pytest.raises(ConfigurationError):
            ema_update(student, make_teacher(other), 0.5)

    def test_invalid_decay(self):
        student = self._model(1)
        with pytest.raises(ConfigurationError):
            ema_update(student, make_teacher(student), 1.5)


def _masks(b, strong=(), weak=()):
    s = torch.zeros(b, dtype=torch.bool)
    w = torch.zeros(b, dtype=torch.bool)
    s[list(strong)] = True
    w[list(weak)] = True
    return s, w


class TestBceLoss:
    def test_perfect_predictions(self):
        targets_s = torch.randint(0, 2, (2, 6, 3)).float()
        targets_w = torch.randint(0, 2, (2, 3)).float()
        preds = PredictionPair(
            strong=targets_s.clamp(1e-7, 1 - 1e-7), weak=targets_w.clamp(1e-7, 1 - 1e-7)
        )
        s_mask, w_mask = _masks(2, strong=[0], weak=[1])
        assert bce_loss(preds, targets_s, targets_w, s_mask, w_mask).item() < 1e-5

    def test_half_posterior_gives_ln2(self):
        preds = PredictionPair(strong=torch.full((2, 6, 3), 0.5), weak=torch.full((2, 3), 0.5))
        targets_s = torch.randint(0, 2, (2, 6, 3)).float()
        targets_w = torch.randint(0, 2, (2, 3)).float()
        s_mask, w_mask = _masks(2, strong=[0, 1], weak=[])
        loss = bce_loss(preds, targets_s, targets_w, s_mask, w_mask)
        assert loss.item() == pytest.approx(math.log(2), rel=1e-6)

    def test_unlabeled_batch_contributes_zero(self):
        preds = _pair()
        s_mask, w_mask = _masks(3)
        loss = bce_loss(preds, torch.zeros(3, 8, 2), torch.zeros(3, 2), s_mask, w_mask)
        assert loss.item() == 0.0

    def test_out_of_range_posterior_rejected(self):
        preds = PredictionPair(strong=torch.full((1, 2, 2), 1.5), weak=torch.zeros(1, 2))
        s_mask, w_mask = _masks(1, strong=[0])
        with pytest.raises(ConfigurationError):
            bce_loss(preds, torch.zeros(1, 2, 2), torch.zeros(1, 2), s_mask, w_mask)


class TestMtLoss:
    def test_identical_predictions(self):
        p = _pair(1)
        assert mt_loss(p, p).item() == 0.0

    def test_constant_offset(self):
        p = _pair(2)
        delta = 0.125
        shifted = PredictionPair(strong=(p.strong * 0 + 0.25), weak=(p.weak * 0 + 0.25))
        base = PredictionPair(
            strong=shifted.strong + delta, weak=shifted.weak + delta
        )
        assert mt_loss(base, shifted).item() == pytest.approx(delta**2, rel=1e-6)

    def test_bounded_for_unit_interval_inputs(self):
        for seed in range(5):
            a, b = _pair(seed), _pair(seed + 100)
            val = mt_loss(a, b).item()
            assert 0.0 <= val <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            mt_loss(_pair(b=2), _pair(b=3))


class TestIctLoss:
    def test_identical_pair_reduces_to_mt(self):
        student, teacher = _pair(3), _pair(4)
        # lam = 0.5 keeps the interpolation bitwise-exact in float32
        assert torch.equal(ict_loss(student, teacher, teacher, 0.5), mt_loss(student, teacher))
        for lam in (0.1, 0.999999):
            ict = ict_loss(student, teacher, teacher, lam)
            assert ict.item() == pytest.approx(mt_loss(student, teacher).item(), abs=1e-6)

    def test_exact_interpolation_is_zero(self):
        ta, tb = _pair(5), _pair(6)
        lam = 0.3
        student = PredictionPair(
            strong=lam * ta.strong + (1 - lam) * tb.strong,
            weak=lam * ta.weak + (1 - lam) * tb.weak,
        )
        assert ict_loss(student, ta, tb, lam).item() == pytest.approx(0.0, abs=1e-14)

    def test_swap_symmetry(self):
        student, ta, tb = _pair(7), _pair(8), _pair(9)
        lam = 0.27
        a = ict_loss(student, ta, tb, lam)
        b = ict_loss(student, tb, ta, 1.0 - lam)
        assert a.item() == pytest.approx(b.item(), rel=1e-12)

    def test_invalid_lambda(self):
        with pytest.raises(ConfigurationError):
            ict_loss(_pair(), _pair(), _pair(), 1.0)
        with pytest.raises(ConfigurationError):
            ict_loss(_pair(), _pair(), _pair(), 0.0)


class TestCompositeLoss:
    def _targets(self, b=3, t=8, c=2):
        return torch.randint(0, 2, (b, t, c)).float(), torch.randint(0, 2, (b, c)).float()

    def test_mean_teacher_path(self):
        student, teacher = _pair(10), _pair(11)
        ts, tw = self._targets()
        s_mask, w_mask = _masks(3, strong=[0], weak=[1])
        draw = AugmentationDraw(use_mixup=False, use_fw=False)
        out = composite_loss(student, teacher, ts, tw, s_mask, w_mask, draw, r_mt=2.0, r_ict=0.0, use_ict=False)
        expected = bce_loss(student, ts, tw, s_mask, w_mask) + 2.0 * mt_loss(student, teacher)
        assert out.total.item() == pytest.approx(expected.item(), rel=1e-12)
        assert out.l_ict.item() == 0.0

    def test_ict_replaces_mt_under_mixup(self):
        student, ta, tb = _pair(12), _pair(13), _pair(14)
        ts, tw = self._targets()
        s_mask, w_mask = _masks(3, strong=[0], weak=[1])
        draw = AugmentationDraw(use_mixup=True, use_fw=False, mix_lambda=0.4)
        out = composite_loss(
            student, (ta, tb), ts, tw, s_mask, w_mask, draw, r_mt=70.0, r_ict=17.5, use_ict=True
        )
        assert out.l_mt.item() == 0.0
        expected = bce_loss(student, ts, tw, s_mask, w_mask) + 17.5 * ict_loss(student, ta, tb, 0.4)
        assert out.total.item() == pytest.approx(expected.item(), rel=1e-12)

    def test_zero_weights_leaves_bce(self):
        student, teacher = _pair(15), _pair(16)
        ts, tw = self._targets()
        s_mask, w_mask = _masks(3, strong=[0], weak=[1])
        draw = AugmentationDraw(use_mixup=False, use_fw=False)
        out = composite_loss(student, teacher, ts, tw, s_mask, w_mask, draw, r_mt=0.0, r_ict=0.0, use_ict=False)
        assert out.total.item() == pytest.approx(
            bce_loss(student, ts, tw, s_mask, w_mask).item(), rel=1e-12
        )

    def test_total_recomposes_bitwise(self):
        student, teacher = _pair(17), _pair(18)
        ts, tw = self._targets()
        s_mask, w_mask = _masks(3, strong=[0], weak=[1])
        draw = AugmentationDraw(use_mixup=False, use_fw=False)
        out = composite_loss(student, teacher, ts, tw, s_mask, w_mask, draw, r_mt=3.5, r_ict=1.0, use_ict=False)
        recomposed = out.l_bce + out.r_mt * out.l_mt + out.r_ict * out.l_ict
        assert out.total.item() == recomposed.item()

    def test_supervised_loss_can_be_disabled(self):
        student, teacher = _pair(19), _pair(20)
        ts, tw = self._targets()
        s_mask, w_mask = _masks(3, strong=[0], weak=[1])
        draw = AugmentationDraw(use_mixup=False, use_fw=False)
        out = composite_loss(
            student, teacher, ts, tw, s_mask, w_mask, draw,
            r_mt=2.0, r_ict=0.0, use_ict=False, supervised_enabled=False,
        )
        assert out.l_bce.item() == 0.0
        assert out.total.item() == pytest.approx(2.0 * mt_loss(student, teacher).item(), rel=1e-12)

    def test_both_terms_active_rejected(self):
        one = torch.tensor(1.0)
        with pytest.raises(ConfigurationError):
            LossBreakdown(l_bce=one, l_mt=one, l_ict=one, r_mt=1.0, r_ict=1.0, total=one * 3)

    def test_mean_teacher_path_rejects_pair(self):
        student = _pair(21)
        ts, tw = self._targets()
        s_mask, w_mask = _masks(3, strong=[0], weak=[1])
        draw = AugmentationDraw(use_mixup=False, use_fw=False)
        with pytest.raises(ConfigurationError):
            composite_loss(
                student, (_pair(22), _pair(23)), ts, tw, s_mask, w_mask, draw,
                r_mt=1.0, r_ict=0.0, use_ict=False,
            )

    def test_negative_weights_rejected(self):
        student, teacher = _pair(24), _pair(25)
        ts, tw = self._targets()
        s_mask, w_mask = _masks(3, strong=[0], weak=[1])
        draw = AugmentationDraw(use_mixup=False, use_fw=False)
        with pytest.raises(ConfigurationError):
            composite_loss(student, teacher, ts, tw, s_mask, w_mask, draw, r_mt=-1.0, r_ict=0.0)
