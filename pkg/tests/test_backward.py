import dataclasses

import numpy as np
import pytest

from linattn import (
    HeadTensor,
    LinearKernelCoeffs,
    Mask,
    MissingForwardState,
    ShapeMismatch,
    backward_causal,
    backward_full,
    finite_diff_grads,
    forward_causal,
    forward_full,
    quadratic_la,
)
from linattn.plan import plan_for

from conftest import seeded_inputs

FORWARD = {Mask.CAUSAL: (forward_causal, backward_causal), Mask.NONE: (forward_full, backward_full)}


def _grads(q, k, v, om, c=None, mask=Mask.CAUSAL, plan=None):
    fwd, bwd = FORWARD[mask]
    return bwd(fwd(q, k, v, c, plan), om, c, plan)


def _t(arr):
    return HeadTensor.from_array(np.asarray(arr, dtype=np.float64)[None])


def _assert_close_to_fd(grads, fd):
    for x, y in zip(grads, fd):
        xa, ya = x.array(), y.array()
        assert np.all(np.abs(xa - ya) <= 1e-7 + 1e-5 * np.abs(ya))


# Frozen from finite_diff_grads on seeded_inputs(11, N=4, D=3), a=b=1, causal, h=1e-6.
SEED11_FD = {
    "dQ": [[0.0, 0.0, 0.0],
           [-2.2133941374180566e-01, 6.0434610649195974e-01, -3.1329125055323814e-01],
           [-1.0024073354708563e-01, 2.8380427347096671e-01, -1.3847623342444493e-01],
           [-1.3418602340387054e-02, 1.9355666880382927e-01, -1.1364462493279603e-01]],
    "dK": [[-0.812107588177291, -0.7156411149233932, 0.8167127504843386],
           [0.17413181635506092, 0.18077269980931732, -0.1906294311848633],
           [-0.031872800621002284, 0.008614052249278359, 0.012078257727310415],
           [0.01302975244366067, -0.014005061221844528, 0.001217630496430644]],
    "dV": [[0.8484039659695242, -0.12716070696416892, 0.2909470282475013],
           [0.8115373217321142, 0.4950021745275812, -0.13109251056908633],
           [0.34315295149855984, 0.3965598923683089, -0.3031262511554722],
           [0.04865469327430816, 0.16540042097057395, -0.2930578916204851]],
}

# Same oracle on seeded_inputs(17, N=3, D=2).
SEED17_FD = {
    "dQ": [[0.0, 0.0], [-0.004944713638543874, -0.04266026243371357],
           [-0.18996498857282162, -0.3484938349007649]],
    "dK": [[0.1580388849786729, 0.07590001005475244], [-0.1368488780351118, -0.06409943678620245],
           [0.08469022486079503, 0.033921471048747875]],
    "dV": [[-0.8246724412241946, -0.3594441649601432], [-0.5260568317067005, -0.40081932115021424],
           [-0.02734259907377634, -0.12894729647938696]],
}


class TestGoldens:
    @pytest.mark.parametrize("seed,n,d,golden", [(11, 4, 3, SEED11_FD), (17, 3, 2, SEED17_FD)])
    def test_matches_frozen_finite_differences(self, seed, n, d, golden):
        q, k, v, om = seeded_inputs(seed, n, d)
        grads = _grads(q, k, v, om, LinearKernelCoeffs(1.0, 1.0))
        for name, x in zip(("dQ", "dK", "dV"), grads):
            np.testing.assert_allclose(x.array()[0], golden[name], rtol=1e-5, atol=1e-8)


class TestBackward:
    @pytest.mark.parametrize("mask", list(Mask))
    def test_zero_cotangent(self, mask):
        q, k, v, _ = seeded_inputs(40, 6, 4)
        for g in _grads(q, k, v, _t(np.zeros((6, 4))), mask=mask):
            assert np.all(g.array() == 0.0)

    @pytest.mark.parametrize("mask", list(Mask))
    def test_single_token(self, mask):
        q, k, v, om = seeded_inputs(41, 1, 1)
        dq, dk, dv = _grads(q, k, v, om, mask=mask)
        np.testing.assert_allclose(dq.array(), 0.0, atol=1e-15)
        np.testing.assert_allclose(dk.array(), 0.0, atol=1e-15)
        np.testing.assert_allclose(dv.array(), om.array(), rtol=1e-14)

    @pytest.mark.parametrize("mask", list(Mask))
    def test_zero_b_has_no_query_key_gradient(self, mask):
        q, k, v, om = seeded_inputs(42, 7, 4)
        dq, dk, _ = _grads(q, k, v, om, LinearKernelCoeffs(1.0, 0.0), mask)
        assert np.all(dq.array() == 0.0) and np.all(dk.array() == 0.0)

    @pytest.mark.parametrize("mask", list(Mask))
    @pytest.mark.parametrize("c", [LinearKernelCoeffs(1.0, 1.0), LinearKernelCoeffs(0.5, 2.0)])
    def test_matches_finite_differences(self, mask, c):
        q, k, v, om = seeded_inputs(43, 9, 4, groups=2)
        _assert_close_to_fd(_grads(q, k, v, om, c, mask), finite_diff_grads(q, k, v, om, c, mask))

    def test_constant_values_against_finite_differences(self):
        q, k, _, om = seeded_inputs(44, 5, 3)
        v = _t(np.tile([0.5, -1.0, 2.0], (5, 1)))
        _, _, dv = _grads(q, k, v, om)
        _, _, fd = finite_diff_grads(q, k, v, om)
        np.testing.assert_allclose(dv.array(), fd.array(), rtol=1e-5, atol=1e-8)

    @pytest.mark.parametrize("mask", list(Mask))
    def test_chunking_matches_finite_differences(self, mask):
        q, k, v, om = seeded_inputs(45, 21, 4)
        plan = plan_for(q, 1, reduction_blocks=2).with_(chunk_rows=5)
        _assert_close_to_fd(_grads(q, k, v, om, mask=mask, plan=plan), finite_diff_grads(q, k, v, om, mask=mask))

    def test_seed19_reduction_blocks_agree(self):
        q, k, v, om = seeded_inputs(19, 40, 32)
        one = _grads(q, k, v, om, plan=plan_for(q, 1, reduction_blocks=1))
        four = _grads(q, k, v, om, plan=plan_for(q, 1, reduction_blocks=4))
        assert np.array_equal(one.dK.data, four.dK.data)

    @pytest.mark.parametrize("mask", list(Mask))
    def test_linear_in_cotangent(self, mask):
        q, k, v, om = seeded_inputs(46, 12, 5)
        om2 = seeded_inputs(99, 12, 5)[0]
        summed = _t(om.array()[0] + 2.0 * om2.array()[0])
        lhs = _grads(q, k, v, summed, mask=mask)
        g1, g2 = _grads(q, k, v, om, mask=mask), _grads(q, k, v, om2, mask=mask)
        for x, y, z in zip(lhs, g1, g2):
            np.testing.assert_allclose(x.array(), y.array() + 2.0 * z.array(), atol=1e-12)

    @pytest.mark.parametrize("mask", list(Mask))
    def test_directional_derivative(self, mask):
        q, k, v, om = seeded_inputs(47, 16, 6)
        dirs = seeded_inputs(300, 16, 6)[:3]
        grads = _grads(q, k, v, om, mask=mask)
        eps = 1e-5

        def psi(s):
            moved = [_t(x.array()[0] + s * d.array()[0]) for x, d in zip((q, k, v), dirs)]
            return float(np.sum(om.array() * quadratic_la(*moved, mask=mask)[0].array()))

        numeric = (psi(eps) - psi(-eps)) / (2 * eps)
        analytic = sum(float(np.sum(g.array() * d.array())) for g, d in zip(grads, dirs))
        assert analytic == pytest.approx(numeric, rel=1e-7, abs=1e-9)

    def test_float32_close_to_float64(self):
        q, k, v, om = seeded_inputs(48, 30, 8)
        lo = _grads(*(t.astype(np.float32) for t in (q, k, v, om)))
        hi = _grads(q, k, v, om)
        for x, y in zip(lo, hi):
            assert x.dtype == np.float32
            np.testing.assert_allclose(x.array(), y.array(), atol=1e-4)


class TestBackwardErrors:
    def test_missing_denominators(self):
        q, k, v, om = seeded_inputs(50, 3, 2)
        art = dataclasses.replace(forward_causal(q, k, v), g=None)
        with pytest.raises(MissingForwardState):
            backward_causal(art, om)

    def test_missing_artifacts(self):
        _, _, _, om = seeded_inputs(50, 3, 2)
        with pytest.raises(MissingForwardState):
            backward_full(None, om)

    def test_mask_mismatch(self):
        q, k, v, om = seeded_inputs(51, 3, 2)
        with pytest.raises(ValueError):
            backward_full(forward_causal(q, k, v), om)

    def test_coefficient_mismatch(self):
        q, k, v, om = seeded_inputs(52, 3, 2)
        with pytest.raises(ValueError):
            backward_causal(forward_causal(q, k, v), om, LinearKernelCoeffs(1.0, 0.5))

    def test_cotangent_shape(self):
        q, k, v, _ = seeded_inputs(53, 3, 2)
        with pytest.raises(ShapeMismatch):
            backward_causal(forward_causal(q, k, v), _t(np.zeros((4, 2))))
