"""Adam optimization, the augment/normalize pipeline, training, prediction.

The epoch loop is deterministic end to end: sample order comes from a
(seed, epoch) stream, each sample's augmentation from a (seed, epoch, index)
stream keyed by dataset index, so results do not depend on batch assembly
order. Given the same config, data, and seed, checkpoint bytes and log
records (minus wall time) are identical across runs.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import data as data_io
from .config import TrainConfig
from .errors import TrainingError
from .losses import StageWeights, jaccard_distance_loss, loss_no_ds, weighted_loss
from .models import CascadeModel, build_cascade, cascade_forward
from .tensor import Tensor, backward, zero_grads


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name, plus step count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def init_adam(named_params):
    state = AdamState()
    for name, p in named_params:
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(named_params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction; reads each parameter's .grad.

    Parameters are mutated in place. A non-finite gradient aborts with the
    offending parameter named.
    """
    state.t += 1
    t = state.t
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter '{name}' at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def normalize_image(image):
    """Image-wise, per-channel standardization: (x - mean) / max(std, 1e-6)."""
    x = image.data
    mean = x.mean(axis=(2, 3), keepdims=True)
    std = x.std(axis=(2, 3), keepdims=True)
    return Tensor((x - mean) / np.maximum(std, np.asarray(1e-6, dtype=x.dtype)))


def apply_augment(image, mask, hflip, vflip, angle_deg):
    """Apply one fixed flip/rotation transform to an image/mask pair.

    The same transform hits image and mask; the image is resampled
    bilinearly, the mask nearest-neighbor so it stays binary. Out-of-bounds
    regions fill with 0. Angle 0 with no flips is the identity.
    """
    img, msk = image.data, mask.data
    if hflip:
        img, msk = img[:, :, :, ::-1], msk[:, :, :, ::-1]
    if vflip:
        img, msk = img[:, :, ::-1, :], msk[:, :, ::-1, :]
    if angle_deg != 0.0:
        kwargs = dict(
            axes=(-2, -1), reshape=False, mode="constant", cval=0.0, prefilter=False
        )
        img = ndimage.rotate(img, angle_deg, order=1, **kwargs)
        msk = ndimage.rotate(msk, angle_deg, order=0, **kwargs)
    return Tensor(np.ascontiguousarray(img)), Tensor(np.ascontiguousarray(msk))


def augment(image, mask, rng, hflip_prob=0.5, vflip_prob=0.5, rotation_range=(-25.0, 25.0)):
    """Random horizontal/vertical flips then a rotation drawn from the range."""
    hflip = rng.random() < hflip_prob
    vflip = rng.random() < vflip_prob
    angle = rng.uniform(*rotation_range)
    return apply_augment(image, mask, hflip, vflip, angle)


def _check_samples(samples, config, what):
    w, h = config.input_size
    for s in samples:
        if s.image.shape != (1, 3, h, w) or s.mask.shape != (1, 1, h, w):
            raise TrainingError(
                f"{what} sample '{s.id}' has image {s.image.shape} / mask {s.mask.shape}; "
                f"config input_size {config.input_size} requires (1,3,{h},{w})"
            )


def _jaccard_index(pred, gt):
    # 0/0 (both empty) counts as perfect agreement
    tp = float(np.logical_and(pred, gt).sum())
    union = float(np.logical_or(pred, gt).sum())
    return tp / union if union > 0 else 1.0


def _validate(model, samples, threshold, batch_size):
    """Mean per-image JA of each stage's thresholded output."""
    stages = len(model.stages)
    totals = np.zeros(stages)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        batch = Tensor(np.concatenate([normalize_image(s.image).data for s in chunk]))
        gt = np.concatenate([s.mask.data for s in chunk]) >= 0.5
        probs = cascade_forward(model, batch)
        for si, prob in enumerate(probs):
            pred = prob.data >= threshold
            totals[si] += sum(
                _jaccard_index(pred[i, 0], gt[i, 0]) for i in range(len(chunk))
            )
    return [float(t / len(samples)) for t in totals]


@dataclass
class TrainResult:
    model: CascadeModel
    config: TrainConfig
    log: list
    total_steps: int
    best_val_ja: float


def train(config, train_set, val_set, out_dir=None, log_hook=None):
    """Run the full training loop; returns the trained cascade and log.

    When ``out_dir`` is given, writes ``final.ckpt`` (updated every epoch),
    ``best.ckpt`` (best final-stage mean validation JA), and
    ``train_log.jsonl`` there. ``log_hook``, if set, receives each epoch
    record as it is produced.

    A non-finite loss or gradient aborts the run; checkpoints already on
    disk from completed epochs are left in place.
    """
    config.validate()
    if not train_set:
        raise TrainingError("training set is empty")
    if not val_set:
        raise TrainingError("validation set is empty")
    _check_samples(train_set, config, "train")
    _check_samples(val_set, config, "val")

    model = build_cascade(
        stages=config.stages,
        fusion_mode=config.fusion_mode,
        seed=config.seed,
        levels=config.levels,
        channel_widths=config.channel_widths,
    )
    params = list(model.named_parameters())
    state = init_adam(params)
    weights = StageWeights(config.alphas)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        log_path.write_text("")

    n = len(train_set)
    steps_per_epoch = n // config.batch_size
    if steps_per_epoch == 0:
        raise TrainingError(
            f"batch_size {config.batch_size} exceeds training set size {n}; no full batch"
        )

    log = []
    best_ja = -1.0
    for epoch in range(config.epochs):
        started = time.monotonic()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        epoch_loss = 0.0
        for step in range(steps_per_epoch):
            idxs = order[step * config.batch_size : (step + 1) * config.batch_size]
            images, masks = [], []
            for idx in idxs:
                s = train_set[int(idx)]
                rng = np.random.default_rng([config.seed, epoch, int(idx)])
                img, msk = augment(
                    s.image,
                    s.mask,
                    rng,
                    hflip_prob=config.hflip_prob,
                    vflip_prob=config.vflip_prob,
                    rotation_range=config.rotation_range_deg,
                )
                images.append(normalize_image(img).data)
                masks.append(msk.data)
            batch = Tensor(np.concatenate(images))
            target = Tensor(np.concatenate(masks))

            probs = cascade_forward(model, batch)
            try:
                stage_losses = [jaccard_distance_loss(target, p) for p in probs]
            except ValueError as exc:
                raise TrainingError(
                    f"aborting at epoch {epoch + 1} step {step + 1}: {exc}"
                ) from exc
            loss = (
                weighted_loss(stage_losses, weights)
                if config.deep_supervision
                else loss_no_ds(stage_losses)
            )
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch + 1} step {step + 1}"
                )
            zero_grads(p for _, p in params)
            backward(loss)
            adam_step(params, state, config.learning_rate)
            epoch_loss += value

        val_ja = _validate(model, val_set, config.threshold, config.batch_size)
        record = {
            "epoch": epoch + 1,
            "train_loss": epoch_loss / steps_per_epoch,
            "val_ja": val_ja,
            "wall_time_s": round(time.monotonic() - started, 3),
        }
        log.append(record)
        if log_hook is not None:
            log_hook(record)
        if out is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
            data_io.save_checkpoint(model, config, out / "final.ckpt")
        if val_ja[-1] > best_ja:
            best_ja = val_ja[-1]
            if out is not None:
                data_io.save_checkpoint(model, config, out / "best.ckpt")

    return TrainResult(model, config, log, state.t, best_ja)


def predict(model, config, image):
    """Forward one image through the cascade and threshold the last stage.

    ``image`` is (1, 3, H, W) at the config's input size, un-normalized or
    normalized (normalization is idempotent). Returns (per-stage probability
    maps, binary mask tensor); mask is 1 where the final map >= threshold.
    """
    w, h = config.input_size
    if image.shape[1:] != (3, h, w):
        raise TrainingError(
            f"image shape {image.shape} does not match checkpoint input size "
            f"(width {w}, height {h})"
        )
    probs = cascade_forward(model, normalize_image(image))
    final = (probs[-1].data >= config.threshold).astype(np.float32)
    return probs, Tensor(final)
