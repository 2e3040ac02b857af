"""The gradient-check harness itself: catches real bugs, passes clean code."""

import numpy as np
import pytest

from cascadeseg import gradcheck
from cascadeseg import tensor as T

FAST_OPS = (
    "add", "mul", "div", "relu", "sigmoid", "concat_channels",
    "conv2d_same", "maxpool2x2", "transposed_conv2x2", "jaccard_loss",
)


def test_case_table_covers_every_op_and_both_nets():
    names = [name for name, _, _, _ in gradcheck.CASES]
    assert len(names) == len(set(names))
    for required in FAST_OPS + ("unet_stage_16", "cascade_2stage_16"):
        assert required in names


def test_fast_op_cases_pass():
    results = gradcheck.run_suite(seed=0, names=FAST_OPS)
    assert len(results) == len(FAST_OPS)
    for r in results:
        assert r.max_rel_err < r.tolerance, r.name


def test_suite_is_deterministic():
    a = gradcheck.run_suite(seed=3, names=("conv2d_same",))[0]
    b = gradcheck.run_suite(seed=3, names=("conv2d_same",))[0]
    assert a.max_rel_err == b.max_rel_err


def test_corrupted_conv_backward_is_caught(monkeypatch):
    real_conv2d = T.conv2d

    def bad_conv2d(x, w, bias, padding="same"):
        out = real_conv2d(x, w, bias, padding)
        real_backward = out._backward

        def skewed(grad):
            real_backward(grad * 1.01)  # 1% systematic error

        out._backward = skewed
        return out

    monkeypatch.setattr(T, "conv2d", bad_conv2d)
    with pytest.raises(AssertionError):
        results = gradcheck.run_suite(seed=0, names=("conv2d_same",))
        assert results[0].max_rel_err < results[0].tolerance


def test_corrupted_relu_subgradient_is_caught(monkeypatch):
    def bad_relu(x):
        out = T.Tensor(np.maximum(x.data, 0.0), parents=(x,), op="relu")

        def backward_fn(grad):
            T._acc(x, grad)  # pretends relu is the identity

        out._backward = backward_fn
        return out

    monkeypatch.setattr(T, "relu", bad_relu)
    results = gradcheck.run_suite(seed=0, names=("relu",))
    assert results[0].max_rel_err > results[0].tolerance


def test_kink_margin_flags_near_kink_relu():
    x = T.Tensor(np.array([[[[1e-9, 0.5]]]]))
    y = T.relu(x)
    assert T.kink_margin(T.tsum(y)) < 1e-6


def test_kink_margin_ignores_exact_ties():
    # a constant window ties exactly: a structural plateau, not a hazard
    x = T.Tensor(np.full((1, 1, 2, 2), 0.7))
    pooled, _ = T.maxpool2x2(x)
    assert T.kink_margin(T.tsum(pooled)) > 0.5


def test_kink_margin_reports_small_positive_gap():
    x = T.Tensor(np.array([[[[0.5, 0.5 + 1e-7], [0.1, 0.2]]]]))
    pooled, _ = T.maxpool2x2(x)
    assert T.kink_margin(T.tsum(pooled)) == pytest.approx(1e-7, rel=1e-3)
