"""Encoder-decoder stages and the multi-stage cascade.

A stage is a UNet: repeated [two 3x3 convs + ReLU, 2x2 maxpool] encoder
levels, a two-conv bottleneck, a decoder of [2x2 transposed conv, skip
concat, two 3x3 convs + ReLU] levels, and a 1x1 conv head with sigmoid.

Three stage flavours share that body:

``none``
    plain UNet on the RGB image (always stage 1).
``cifs``
    dual-path encoder: the image path encodes the RGB image and a second
    context path encodes the previous stage's probability map. At every
    scale, just before pooling, the two paths' features are added; the sum
    is both the skip connection and the image path's pooling input, while
    the context path pools its own pre-fusion features. The bottleneck
    outputs are added once before the decoder.
``concat_input``
    the classic auto-context baseline: the probability map is concatenated
    to the image as a fourth input channel of a single-path UNet.

The cascade runs stage 1 plain, then feeds each stage's probability map to
the next, returning every stage's map so each can be supervised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    add,
    concat_channels,
    conv2d,
    maxpool2x2,
    relu,
    sigmoid,
    transposed_conv2x2,
)

FUSION_MODES = ("none", "cifs", "concat_input")


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    levels: int = 4
    channel_widths: tuple = (16, 32, 64, 128, 256)
    fusion_mode: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "channel_widths", tuple(self.channel_widths))
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if len(self.channel_widths) != self.levels + 1:
            raise ConfigError(
                f"channel_widths needs levels+1={self.levels + 1} entries, "
                f"got {len(self.channel_widths)}"
            )
        if self.in_channels < 1 or any(c < 1 for c in self.channel_widths):
            raise ConfigError("channel counts must be positive")


class StageModel:
    """Named parameter tensors for one stage, in checkpoint order."""

    def __init__(self, config, params):
        self.config = config
        self.params = dict(params)

    def named_parameters(self):
        return self.params.items()

    def parameter_count(self):
        return sum(p.data.size for p in self.params.values())


class CascadeModel:
    """Ordered stages; stage 1 is plain, later stages share one fusion mode."""

    def __init__(self, stages):
        if not stages:
            raise ConfigError("cascade needs at least one stage")
        if stages[0].config.fusion_mode != "none":
            raise ConfigError("stage 1 must have fusion_mode 'none'")
        later = {s.config.fusion_mode for s in stages[1:]}
        if later and later not in ({"cifs"}, {"concat_input"}):
            raise ConfigError(
                "stages 2..S must share one fusion_mode in {'cifs', 'concat_input'}"
            )
        self.stages = list(stages)

    @property
    def stage_count(self):
        return len(self.stages)

    def named_parameters(self):
        for s, stage in enumerate(self.stages, start=1):
            for name, p in stage.named_parameters():
                yield f"stage{s}.{name}", p

    def parameter_count(self):
        return sum(s.parameter_count() for s in self.stages)


def _he_conv(rng, cout, cin, k, dtype):
    std = np.sqrt(2.0 / (k * k * cin))
    return Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype))


def _zero_bias(cout, dtype):
    return Tensor(np.zeros((1, cout, 1, 1), dtype=dtype))


def _encoder_params(rng, prefix, in_ch, widths, levels, dtype, params):
    prev = in_ch
    for i in range(levels):
        params[f"{prefix}{i}.conv1.w"] = _he_conv(rng, widths[i], prev, 3, dtype)
        params[f"{prefix}{i}.conv1.b"] = _zero_bias(widths[i], dtype)
        params[f"{prefix}{i}.conv2.w"] = _he_conv(rng, widths[i], widths[i], 3, dtype)
        params[f"{prefix}{i}.conv2.b"] = _zero_bias(widths[i], dtype)
        prev = widths[i]
    mid = "mid" if prefix == "enc" else "ctxmid"
    params[f"{mid}.conv1.w"] = _he_conv(rng, widths[levels], prev, 3, dtype)
    params[f"{mid}.conv1.b"] = _zero_bias(widths[levels], dtype)
    params[f"{mid}.conv2.w"] = _he_conv(rng, widths[levels], widths[levels], 3, dtype)
    params[f"{mid}.conv2.b"] = _zero_bias(widths[levels], dtype)


def build_stage(config, seed, dtype=np.float32):
    """Seeded He-initialised parameters; shapes follow only from the config.

    Weights draw from N(0, 2/(kH*kW*Cin)); biases start at zero. The same
    seed reproduces bit-identical parameters.
    """
    rng = np.random.default_rng(seed)
    widths = config.channel_widths
    levels = config.levels
    params = {}

    img_in = config.in_channels
    if config.fusion_mode == "concat_input":
        img_in += 1
    _encoder_params(rng, "enc", img_in, widths, levels, dtype, params)
    if config.fusion_mode == "cifs":
        _encoder_params(rng, "ctx", 1, widths, levels, dtype, params)

    for i in reversed(range(levels)):
        params[f"dec{i}.up.w"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / (4 * widths[i + 1])), (widths[i + 1], widths[i], 2, 2)).astype(dtype)
        )
        params[f"dec{i}.conv1.w"] = _he_conv(rng, widths[i], 2 * widths[i], 3, dtype)
        params[f"dec{i}.conv1.b"] = _zero_bias(widths[i], dtype)
        params[f"dec{i}.conv2.w"] = _he_conv(rng, widths[i], widths[i], 3, dtype)
        params[f"dec{i}.conv2.b"] = _zero_bias(widths[i], dtype)

    params["head.w"] = _he_conv(rng, 1, widths[0], 1, dtype)
    params["head.b"] = _zero_bias(1, dtype)
    return StageModel(config, params)


def _double_conv(x, params, prefix):
    x = relu(conv2d(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"]))
    return relu(conv2d(x, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"]))


def _decode(x, skips, params, levels):
    for i in reversed(range(levels)):
        x = transposed_conv2x2(x, params[f"dec{i}.up.w"])
        x = concat_channels(skips[i], x)
        x = _double_conv(x, params, f"dec{i}")
    return sigmoid(conv2d(x, params["head.w"], params["head.b"]))


def _check_input(model, image, expected_channels):
    levels = model.config.levels
    n, c, h, w = image.shape
    if c != expected_channels:
        raise ShapeError(
            f"stage expects {expected_channels} input channels, got {c}"
        )
    div = 2 ** levels
    if h % div or w % div:
        raise ShapeError(
            f"input {h}x{w} must be divisible by 2^levels = {div}"
        )


def stage_forward_plain(model, image):
    """Plain UNet: (N, C, H, W) image -> (N, 1, H, W) probability map."""
    p = model.params
    _check_input(model, image, model.config.in_channels)
    skips = []
    x = image
    for i in range(model.config.levels):
        x = _double_conv(x, p, f"enc{i}")
        skips.append(x)
        x, _ = maxpool2x2(x)
    x = _double_conv(x, p, "mid")
    return _decode(x, skips, p, model.config.levels)


def stage_forward_cifs(model, image, prev_prob):
    """Dual-path stage: image and previous probability map, fused per scale."""
    if model.config.fusion_mode != "cifs":
        raise ConfigError("stage_forward_cifs needs a cifs-mode stage")
    p = model.params
    _check_input(model, image, model.config.in_channels)
    if prev_prob.shape != (image.shape[0], 1) + image.shape[2:]:
        raise ShapeError(
            f"prev_prob shape {prev_prob.shape} does not match image {image.shape}"
        )
    skips = []
    xi, xc = image, prev_prob
    for i in range(model.config.levels):
        ai = _double_conv(xi, p, f"enc{i}")
        bi = _double_conv(xc, p, f"ctx{i}")
        fused = add(ai, bi)
        skips.append(fused)
        xi, _ = maxpool2x2(fused)
        xc, _ = maxpool2x2(bi)
    bottom = add(_double_conv(xi, p, "mid"), _double_conv(xc, p, "ctxmid"))
    return _decode(bottom, skips, p, model.config.levels)


def stage_forward_concat(model, image, prev_prob):
    """Concatenation baseline: single path on the 4-channel [image, prob]."""
    if model.config.fusion_mode != "concat_input":
        raise ConfigError("stage_forward_concat needs a concat_input-mode stage")
    if prev_prob.shape != (image.shape[0], 1) + image.shape[2:]:
        raise ShapeError(
            f"prev_prob shape {prev_prob.shape} does not match image {image.shape}"
        )
    p = model.params
    x = concat_channels(image, prev_prob)
    levels = model.config.levels
    n, c, h, w = x.shape
    div = 2 ** levels
    if h % div or w % div:
        raise ShapeError(f"input {h}x{w} must be divisible by 2^levels = {div}")
    skips = []
    for i in range(levels):
        x = _double_conv(x, p, f"enc{i}")
        skips.append(x)
        x, _ = maxpool2x2(x)
    x = _double_conv(x, p, "mid")
    return _decode(x, skips, p, levels)


def stage_forward(model, image, prev_prob=None):
    mode = model.config.fusion_mode
    if mode == "none":
        return stage_forward_plain(model, image)
    if prev_prob is None:
        raise ShapeError(f"{mode} stage needs the previous probability map")
    if mode == "cifs":
        return stage_forward_cifs(model, image, prev_prob)
    return stage_forward_concat(model, image, prev_prob)


def build_cascade(stages, fusion_mode, seed, in_channels=3, levels=4,
                  channel_widths=(16, 32, 64, 128, 256), dtype=np.float32):
    """Stage 1 plain + stages 2..S in ``fusion_mode``, each with its own seed."""
    if stages < 1:
        raise ConfigError("stages must be >= 1")
    if stages > 1 and fusion_mode not in ("cifs", "concat_input"):
        raise ConfigError("fusion_mode must be 'cifs' or 'concat_input' for S > 1")
    stage_seeds = np.random.SeedSequence(seed).spawn(stages)
    models = []
    for s in range(stages):
        mode = "none" if s == 0 else fusion_mode
        cfg = UNetConfig(in_channels, levels, channel_widths, mode)
        models.append(build_stage(cfg, stage_seeds[s], dtype=dtype))
    return CascadeModel(models)


def cascade_forward(model, image):
    """All S probability maps for one batch; each feeds the next stage."""
    outs = [stage_forward_plain(model.stages[0], image)]
    for stage in model.stages[1:]:
        outs.append(stage_forward(stage, image, outs[-1]))
    return outs
