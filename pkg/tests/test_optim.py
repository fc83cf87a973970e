"""LR schedule closed forms and AdamW single-step hand values."""

import math

import numpy as np
import pytest

from mvdistill.errors import ConfigError, NumericError, UsageError
from mvdistill.optim import AdamW, OptimConfig, ScheduleConfig, adamw_step, lr_at
from mvdistill.tensor import Tensor

PAPER = ScheduleConfig(total_steps=1_400_000, warmup_steps=80_000,
                       constant_steps=320_000, peak_lr=5e-2, final_lr=1e-4)


class TestSchedule:
    def test_paper_fidelity_checkpoints(self):
        assert lr_at(80_000, PAPER) == pytest.approx(5e-2, abs=1e-12)
        assert lr_at(400_000, PAPER) == pytest.approx(5e-2, abs=1e-12)
        assert lr_at(1_400_000, PAPER) == pytest.approx(1e-4, abs=1e-12)

    def test_warmup_from_zero(self):
        assert lr_at(0, PAPER) == 0.0
        assert lr_at(40_000, PAPER) == pytest.approx(2.5e-2, abs=1e-12)

    def test_cosine_midpoint(self):
        mid = 400_000 + (1_400_000 - 400_000) // 2
        assert lr_at(mid, PAPER) == pytest.approx((5e-2 + 1e-4) / 2, abs=1e-12)
        assert lr_at(mid, PAPER) == pytest.approx(0.02505, abs=1e-12)

    def test_continuity_at_phase_boundaries(self):
        for boundary in (80_000, 400_000):
            left = lr_at(boundary - 1, PAPER)
            right = lr_at(boundary + 1, PAPER)
            at = lr_at(boundary, PAPER)
            assert abs(at - left) < 5e-2 / 80_000 * 1.01
            assert abs(at - right) < 1e-5

    def test_monotone_phases(self):
        cfg = ScheduleConfig(total_steps=100, warmup_steps=20, constant_steps=30,
                             peak_lr=1e-2, final_lr=1e-5)
        lrs = [lr_at(s, cfg) for s in range(101)]
        assert all(b >= a for a, b in zip(lrs[:20], lrs[1:21]))     # warmup up
        assert all(x == 1e-2 for x in lrs[20:51])                   # flat
        assert all(b <= a for a, b in zip(lrs[50:100], lrs[51:101]))  # decay

    def test_step_out_of_range(self):
        with pytest.raises(UsageError):
            lr_at(PAPER.total_steps + 1, PAPER)
        with pytest.raises(UsageError):
            lr_at(-1, PAPER)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ScheduleConfig(total_steps=10, warmup_steps=8,
                           constant_steps=8).validate()
        with pytest.raises(ConfigError):
            ScheduleConfig(peak_lr=1e-5, final_lr=1e-3).validate()


class TestAdamWStep:
    def test_hand_computed_first_step(self):
        # w=1, g=0.5, lr=0.1, betas (0.9, 0.999), eps=1e-8, wd=0.04:
        # m_hat=0.5, v_hat=0.25, w' = 1 - 0.1*(0.5/(0.5+1e-8) + 0.04)
        state = {}
        w = adamw_step(np.array([1.0]), np.array([0.5]), state, lr=0.1)
        expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.04)
        assert abs(w[0] - expected) < 1e-9
        assert abs(w[0] - 0.896) < 1e-8  # the rounded reference value

    def test_zero_grad_zero_decay_is_identity(self):
        state = {}
        w = adamw_step(np.array([2.5]), np.array([0.0]), state, lr=0.1,
                       weight_decay=0.0)
        assert w[0] == 2.5

    def test_zero_grad_pure_decay(self):
        state = {}
        w = adamw_step(np.array([2.0]), np.array([0.0]), state, lr=0.1,
                       weight_decay=0.04)
        assert w[0] == pytest.approx(2.0 * (1 - 0.1 * 0.04), abs=1e-12)


class TestAdamWOptimizer:
    def make(self, wd=0.04, clip=None):
        params = {
            "w": Tensor(np.array([1.0], dtype=np.float32), requires_grad=True),
            "bias": Tensor(np.array([1.0], dtype=np.float32), requires_grad=True),
        }
        opt = AdamW(params, OptimConfig(weight_decay=wd, clip_grad_norm=clip))
        return params, opt

    def test_matches_functional_form(self):
        # 2-D parameter so the decay path applies (1-D params skip decay)
        params = {"w": Tensor(np.ones((1, 1), dtype=np.float32),
                              requires_grad=True)}
        opt = AdamW(params, OptimConfig(weight_decay=0.04, clip_grad_norm=None))
        params["w"].grad = np.full((1, 1), 0.5, dtype=np.float32)
        opt.step(lr=0.1)
        expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.04)
        assert params["w"].data[0, 0] == pytest.approx(expected, abs=1e-7)

    def test_bias_gets_no_decay(self):
        params, opt = self.make()
        params["w"].grad = np.array([0.0], dtype=np.float32)
        params["bias"].grad = np.array([0.0], dtype=np.float32)
        opt.step(lr=0.1)
        assert params["bias"].data[0] == 1.0  # 1-D param: no decay, no grad
        assert params["w"].data[0] == 1.0     # also 1-D shape here
        params2 = {"w": Tensor(np.ones((2, 2), dtype=np.float32),
                               requires_grad=True)}
        opt2 = AdamW(params2, OptimConfig(weight_decay=0.04))
        params2["w"].grad = np.zeros((2, 2), dtype=np.float32)
        opt2.step(lr=0.1)
        np.testing.assert_allclose(params2["w"].data, 1.0 - 0.1 * 0.04,
                                   atol=1e-7)

    def test_frozen_param_bit_identical(self):
        params2 = {"proto": Tensor(np.ones((2, 3), dtype=np.float32) * 0.5,
                                   requires_grad=True)}
        opt = AdamW(params2, OptimConfig(weight_decay=0.04))
        before = params2["proto"].data.copy()
        params2["proto"].grad = np.full((2, 3), 0.7, dtype=np.float32)
        opt.step(lr=0.1, frozen={"proto"})
        assert np.array_equal(params2["proto"].data, before)
        assert opt.state["proto"].t == 0
        opt.step(lr=0.1)  # unfrozen: bias correction starts at t=1
        assert opt.state["proto"].t == 1
        assert not np.array_equal(params2["proto"].data, before)

    def test_clip_bounds_global_norm(self):
        params, opt = self.make(clip=1.0)
        params["w"].grad = np.array([30.0], dtype=np.float32)
        params["bias"].grad = np.array([40.0], dtype=np.float32)
        norm = opt.clip_gradients()
        assert norm == pytest.approx(50.0)
        clipped = np.sqrt(params["w"].grad[0] ** 2 + params["bias"].grad[0] ** 2)
        assert clipped == pytest.approx(1.0, rel=1e-6)

    def test_nan_grad_raises(self):
        params, opt = self.make()
        params["w"].grad = np.array([np.nan], dtype=np.float32)
        with pytest.raises(NumericError):
            opt.step(lr=0.1)

    def test_state_roundtrip(self):
        params, opt = self.make()
        params["w"].grad = np.array([0.5], dtype=np.float32)
        params["bias"].grad = np.array([0.2], dtype=np.float32)
        opt.step(lr=0.1)
        blob = opt.state_tensors()
        params2, opt2 = self.make()
        opt2.load_state_tensors(blob)
        for name in opt.state:
            assert np.array_equal(opt.state[name].m, opt2.state[name].m)
            assert np.array_equal(opt.state[name].v, opt2.state[name].v)
            assert opt.state[name].t == opt2.state[name].t
