"""Named finite-difference gradient checks for every operator and the loss.

Each case builds a small float64 graph, compares backward() against central
differences (step 1e-5), and reports the max relative error. Graphs with
kinks (relu, maxpool) are resampled until every kink is at least 1e-3 from
its switching point, so the finite-difference step cannot cross one.

Ops are referenced through the module objects (T.conv2d, not a bound name)
so a test harness can swap in a corrupted implementation and watch the
suite fail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import models as M
from . import tensor as T

STEP = 1e-5
# margin a pre-activation must keep from its kink before FD runs; the tiny
# nets get a looser bound (thousands of relu entries make 1e-3 unreachable;
# 2e-4 is still 20x the FD step) plus a resample-and-retry on failure
OP_MARGIN = 1e-3
NET_MARGIN = 2e-4
MAX_RESAMPLES = 64
MAX_RETRIES = 3


def _rand(rng, shape, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, shape))


def _case_add(rng):
    a, b, c = (_rand(rng, (2, 3, 4, 4)) for _ in range(3))
    return lambda: T.tsum(T.mul(T.add(a, b), c)), [a, b, c]


def _case_sub(rng):
    a, b, c = (_rand(rng, (2, 3, 4, 4)) for _ in range(3))
    return lambda: T.tsum(T.mul(T.sub(a, b), c)), [a, b, c]


def _case_mul(rng):
    a, b = (_rand(rng, (2, 3, 4, 4)) for _ in range(2))
    return lambda: T.tsum(T.mul(a, b)), [a, b]


def _case_div(rng):
    a = _rand(rng, (2, 3, 4, 4))
    b = _rand(rng, (2, 3, 4, 4), 0.5, 1.5)
    return lambda: T.tsum(T.div(a, b)), [a, b]


def _case_scale_shift(rng):
    a, b = (_rand(rng, (1, 2, 4, 4)) for _ in range(2))
    return lambda: T.tsum(T.mul(T.add_scalar(T.scale(a, 1.7), 0.3), b)), [a, b]


def _case_tsum(rng):
    a = _rand(rng, (2, 2, 4, 4))
    return lambda: T.tsum(T.mul(a, a)), [a]


def _case_relu(rng):
    a, b = (_rand(rng, (2, 3, 4, 4)) for _ in range(2))
    return lambda: T.tsum(T.mul(T.relu(a), b)), [a, b]


def _case_sigmoid(rng):
    a = _rand(rng, (2, 3, 4, 4), -3.0, 3.0)
    b = _rand(rng, (2, 3, 4, 4))
    return lambda: T.tsum(T.mul(T.sigmoid(a), b)), [a, b]


def _case_concat(rng):
    a = _rand(rng, (2, 2, 4, 4))
    b = _rand(rng, (2, 3, 4, 4))
    c = _rand(rng, (2, 5, 4, 4))
    return lambda: T.tsum(T.mul(T.concat_channels(a, b), c)), [a, b, c]


def _conv_case(rng, padding, k):
    x = _rand(rng, (1, 2, 6, 6))
    w = _rand(rng, (3, 2, k, k), -0.5, 0.5)
    bias = _rand(rng, (1, 3, 1, 1), -0.2, 0.2)
    out_hw = 6 if padding == "same" else 6 - k + 1
    m = _rand(rng, (1, 3, out_hw, out_hw))
    return (
        lambda: T.tsum(T.mul(T.conv2d(x, w, bias, padding=padding), m)),
        [x, w, bias, m],
    )


def _case_conv_same(rng):
    return _conv_case(rng, "same", 3)


def _case_conv_valid(rng):
    return _conv_case(rng, "valid", 3)


def _case_conv_1x1(rng):
    return _conv_case(rng, "same", 1)


def _case_maxpool(rng):
    x = _rand(rng, (2, 2, 6, 6))
    m = _rand(rng, (2, 2, 3, 3))
    return lambda: T.tsum(T.mul(T.maxpool2x2(x)[0], m)), [x, m]


def _case_transposed_conv(rng):
    x = _rand(rng, (2, 3, 3, 3))
    w = _rand(rng, (3, 2, 2, 2), -0.5, 0.5)
    m = _rand(rng, (2, 2, 6, 6))
    return lambda: T.tsum(T.mul(T.transposed_conv2x2(x, w), m)), [x, w, m]


def _case_jaccard(rng):
    t = T.Tensor((rng.uniform(0, 1, (1, 1, 4, 4)) < 0.4).astype(np.float64))
    t.data[0, 0, 0, 0] = 1.0  # keep the foreground non-empty
    z = _rand(rng, (1, 1, 4, 4), -2.0, 2.0)
    return lambda: L.jaccard_distance_loss(t, T.sigmoid(z)), [z]


def _case_weighted_ds(rng):
    t = T.Tensor((rng.uniform(0, 1, (1, 1, 4, 4)) < 0.4).astype(np.float64))
    t.data[0, 0, 0, 0] = 1.0
    z1 = _rand(rng, (1, 1, 4, 4), -2.0, 2.0)
    z2 = _rand(rng, (1, 1, 4, 4), -2.0, 2.0)
    weights = L.StageWeights((0.7, 1.0))

    def build():
        stage_losses = [
            L.jaccard_distance_loss(t, T.sigmoid(z1)),
            L.jaccard_distance_loss(t, T.sigmoid(z2)),
        ]
        return L.weighted_loss(stage_losses, weights)

    return build, [z1, z2]


def _boost_weights(model_params, rng, factor=3.0, head_scale=0.1):
    # Spreads pre-activations so relu/maxpool kink margins clear the FD step;
    # nonzero biases keep conv outputs over relu-clamped patches off exact 0.
    # The head is damped instead: saturated sigmoids (exactly 0/1 in floats)
    # would feed constant plateaus into the next stage's context path.
    for name, p in model_params:
        if name.endswith("head.w"):
            p.data *= head_scale
        elif name.endswith(".w"):
            p.data *= factor
        elif name.endswith(".b"):
            p.data[:] = rng.uniform(0.02, 0.2, p.data.shape)


def _tiny_target(rng, hw=16):
    t = T.Tensor((rng.uniform(0, 1, (1, 1, hw, hw)) < 0.4).astype(np.float64))
    t.data[0, 0, hw // 2, hw // 2] = 1.0
    return t


def _case_unet_stage(rng):
    cfg = M.UNetConfig(in_channels=3, levels=2, channel_widths=(2, 3, 4), fusion_mode="none")
    stage = M.build_stage(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    _boost_weights(stage.named_parameters(), rng)
    x = _rand(rng, (1, 3, 16, 16))
    t = _tiny_target(rng)

    def build():
        return L.jaccard_distance_loss(t, M.stage_forward(stage, x))

    return build, [x] + [p for _, p in stage.named_parameters()]


def _case_cascade_2stage(rng):
    model = M.build_cascade(
        stages=2,
        fusion_mode="cifs",
        seed=int(rng.integers(1 << 31)),
        levels=2,
        channel_widths=(2, 3, 4),
        dtype=np.float64,
    )
    _boost_weights(model.named_parameters(), rng, factor=1.5)
    x = _rand(rng, (1, 3, 16, 16))
    t = _tiny_target(rng)
    weights = L.StageWeights((0.7, 1.0))

    def build():
        probs = M.cascade_forward(model, x)
        return L.weighted_loss([L.jaccard_distance_loss(t, p) for p in probs], weights)

    return build, [x] + [p for _, p in model.named_parameters()]


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def ok(self):
        return self.max_rel_err < self.tolerance


OP_TOL = 1e-4
NET_TOL = 1e-3

CASES = (
    ("add", OP_TOL, OP_MARGIN, _case_add),
    ("sub", OP_TOL, OP_MARGIN, _case_sub),
    ("mul", OP_TOL, OP_MARGIN, _case_mul),
    ("div", OP_TOL, OP_MARGIN, _case_div),
    ("scale_shift", OP_TOL, OP_MARGIN, _case_scale_shift),
    ("tsum", OP_TOL, OP_MARGIN, _case_tsum),
    ("relu", OP_TOL, OP_MARGIN, _case_relu),
    ("sigmoid", OP_TOL, OP_MARGIN, _case_sigmoid),
    ("concat_channels", OP_TOL, OP_MARGIN, _case_concat),
    ("conv2d_same", OP_TOL, OP_MARGIN, _case_conv_same),
    ("conv2d_valid", OP_TOL, OP_MARGIN, _case_conv_valid),
    ("conv2d_1x1", OP_TOL, OP_MARGIN, _case_conv_1x1),
    ("maxpool2x2", OP_TOL, OP_MARGIN, _case_maxpool),
    ("transposed_conv2x2", OP_TOL, OP_MARGIN, _case_transposed_conv),
    ("jaccard_loss", OP_TOL, OP_MARGIN, _case_jaccard),
    ("weighted_deep_supervision", OP_TOL, OP_MARGIN, _case_weighted_ds),
    ("unet_stage_16", NET_TOL, NET_MARGIN, _case_unet_stage),
    ("cascade_2stage_16", NET_TOL, NET_MARGIN, _case_cascade_2stage),
)


def run_case(builder, rng, tolerance, margin_min):
    """Check one case, resampling past kinks; returns the max relative error.

    An over-tolerance result is retried on fresh draws: a kink crossed by the
    finite-difference step is draw-specific, a wrong backward fails every
    draw. The worst error only counts after MAX_RETRIES failures.
    """
    worst = 0.0
    for _ in range(MAX_RETRIES):
        for _ in range(MAX_RESAMPLES):
            build_loss, tensors = builder(rng)
            if T.kink_margin(build_loss()) >= margin_min:
                break
        else:
            raise RuntimeError("could not sample inputs clear of relu/maxpool kinks")
        err = T.grad_check(build_loss, tensors, step=STEP)
        if err < tolerance:
            return err
        worst = max(worst, err)
    return worst


def run_suite(seed=0, names=None):
    """Run all (or the named) checks; returns a list of CheckResult."""
    results = []
    for case_index, (name, tol, margin_min, builder) in enumerate(CASES):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, case_index])
        results.append(CheckResult(name, run_case(builder, rng, tol, margin_min), tol))
    return results
