"""Dataset IO, resizing, the synthetic lesion generator, and checkpoints.

Disk layout for real datasets: ``<dir>/images/<id>.png`` (8-bit RGB) and
``<dir>/masks/<id>.png`` (8-bit grayscale, values {0, 255}); ids come from
filename stems and pairs are matched by id.

Checkpoints use a flat little-endian binary container:

    magic "MSUN" | version u16 | tensor count u32 |
    per tensor: name length u16, UTF-8 name, rank u8, dims u32 each,
                raw float32 data |
    config length u32 | config JSON (UTF-8)

Tensor names run stage by stage in build order (image encoder, context
encoder when present, decoder deep to shallow, head), so the container is
reproducible byte for byte from the same model.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import TrainConfig
from .errors import CheckpointError, DataError
from .models import CascadeModel, UNetConfig, build_stage
from .tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MSUN"
CHECKPOINT_VERSION = 1


@dataclass
class SamplePair:
    """One image/mask pair; image values start in [0, 1], mask is {0, 1}."""

    id: str
    image: Tensor  # (1, 3, H, W)
    mask: Tensor  # (1, 1, H, W)


# ---------------------------------------------------------------------------
# resizing


def _nearest_indices(n_in, n_out):
    return np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)


def _bilinear_axis(arr, n_out, axis):
    n_in = arr.shape[axis]
    # pixel-centre alignment: out centre i+0.5 maps to in coordinate
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (src - lo).astype(arr.dtype)
    shape = [1] * arr.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1 - frac) + np.take(arr, hi, axis=axis) * frac


def resize(t, size, kind):
    """Resize (N, C, H, W) to (width, height) = ``size``.

    ``kind`` is 'bilinear' (images) or 'nearest' (masks; exact values are
    preserved so binary masks stay binary).
    """
    w_out, h_out = int(size[0]), int(size[1])
    if w_out < 1 or h_out < 1:
        raise DataError(f"resize: target {w_out}x{h_out} must be positive")
    n, c, h_in, w_in = t.shape
    if (h_in, w_in) == (h_out, w_out):
        return Tensor(t.data.copy())
    if kind == "nearest":
        rows = _nearest_indices(h_in, h_out)
        cols = _nearest_indices(w_in, w_out)
        out = t.data[:, :, rows][:, :, :, cols]
    elif kind == "bilinear":
        out = _bilinear_axis(_bilinear_axis(t.data, h_out, 2), w_out, 3)
    else:
        raise ValueError(f"resize: unknown kind {kind!r}")
    return Tensor(np.ascontiguousarray(out))


# ---------------------------------------------------------------------------
# disk datasets


def load_image(path):
    """Read an RGB PNG into a (1, 3, H, W) tensor with values in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return Tensor(arr.transpose(2, 0, 1)[np.newaxis])


def _read_mask(path):
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    binary = (arr >= 128).astype(np.float32)
    return Tensor(binary[np.newaxis, np.newaxis])


def load_dataset(root, expected_size):
    """Load image/mask pairs under ``root``, resized to (width, height).

    Pairs are matched by filename stem and returned sorted by id. Any image
    without a mask (or mask without an image) fails the whole load.
    """
    root = Path(root)
    image_dir, mask_dir = root / "images", root / "masks"
    images = {p.stem: p for p in sorted(image_dir.glob("*.png"))} if image_dir.is_dir() else {}
    masks = {p.stem: p for p in sorted(mask_dir.glob("*.png"))} if mask_dir.is_dir() else {}
    orphan_images = sorted(set(images) - set(masks))
    orphan_masks = sorted(set(masks) - set(images))
    if orphan_images or orphan_masks:
        raise DataError(
            f"unpaired files under {root}: images without masks {orphan_images}, "
            f"masks without images {orphan_masks}"
        )
    if not images:
        logger.warning("no image/mask pairs found under %s", root)
        return []
    samples = []
    for sample_id in sorted(images):
        image = resize(load_image(images[sample_id]), expected_size, "bilinear")
        mask = resize(_read_mask(masks[sample_id]), expected_size, "nearest")
        samples.append(SamplePair(sample_id, image, mask))
    return samples


def save_dataset(samples, root):
    """Write samples in the on-disk layout (8-bit PNGs)."""
    root = Path(root)
    image_dir, mask_dir = root / "images", root / "masks"
    image_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        rgb = np.clip(np.rint(s.image.data[0] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb.transpose(1, 2, 0), "RGB").save(image_dir / f"{s.id}.png")
        gray = (s.mask.data[0, 0] >= 0.5).astype(np.uint8) * 255
        Image.fromarray(gray, "L").save(mask_dir / f"{s.id}.png")


# ---------------------------------------------------------------------------
# synthetic lesions


@dataclass
class SynthParams:
    """Knobs for the procedural lesion generator.

    Each sample is a skin-toned canvas with one perturbed-ellipse lesion:
    a darker, redder region with a slightly soft edge, plus texture noise
    and up to ``hair_max`` dark anti-aliased hair arcs drawn over
    everything. The ground-truth mask is the exact rasterised region, so
    labels are perfect by construction.
    """

    count: int = 10
    seed: int = 0
    canvas: tuple = (64, 64)  # (width, height)
    axis_range: tuple = (0.1, 0.4)  # ellipse axes as fraction of canvas dims
    contrast_range: tuple = (0.05, 0.35)  # lesion-vs-skin mean intensity gap
    noise_range: tuple = (0.01, 0.08)
    hair_max: int = 5
    border_amp_range: tuple = (0.0, 0.3)  # radial perturbation amplitude


def _border_wiggle(rng):
    # Low-frequency radial perturbation with |f(theta)| <= 1.
    ks = np.arange(2, 6)
    coeffs = rng.normal(0.0, 1.0, ks.size)
    phases = rng.uniform(0.0, 2 * np.pi, ks.size)
    norm = np.abs(coeffs).sum()
    if norm < 1e-12:
        coeffs[:] = 0.0
        norm = 1.0
    return ks, coeffs / norm, phases


def _synth_one(rng, params):
    w, h = params.canvas
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    # lesion geometry: rotated ellipse with a wiggly border
    cx = rng.uniform(0.38, 0.62) * w
    cy = rng.uniform(0.38, 0.62) * h
    # axis_range is the full-axis fraction of the canvas dim; >= 1.5 px keeps
    # the rasterised region non-degenerate on tiny canvases
    a = max(rng.uniform(*params.axis_range) * w / 2.0, 1.5)
    b = max(rng.uniform(*params.axis_range) * h / 2.0, 1.5)
    tilt = rng.uniform(0.0, np.pi)
    amp = rng.uniform(*params.border_amp_range)
    ks, coeffs, phases = _border_wiggle(rng)

    dx, dy = xs - cx, ys - cy
    u = (np.cos(tilt) * dx + np.sin(tilt) * dy) / a
    v = (-np.sin(tilt) * dx + np.cos(tilt) * dy) / b
    rho = np.sqrt(u * u + v * v)
    theta = np.arctan2(v, u)
    wig = np.zeros_like(theta)
    for k, c, ph in zip(ks, coeffs, phases):
        wig += c * np.cos(k * theta + ph)
    bound = 1.0 + amp * wig
    mask = (rho <= bound).astype(np.float32)

    # skin base and darker/redder lesion fill, blended over ~1.5 px
    skin = np.array([
        rng.uniform(0.70, 0.88),
        rng.uniform(0.52, 0.70),
        rng.uniform(0.45, 0.62),
    ])
    gap = rng.uniform(*params.contrast_range)
    lesion = np.clip(skin - gap * np.array([0.6, 1.2, 1.2]), 0.02, 1.0)
    edge = 1.5 / max(min(a, b), 1.0)
    alpha = np.clip((bound - rho) / edge, 0.0, 1.0)
    img = skin[:, None, None] + alpha[None] * (lesion - skin)[:, None, None]

    # hair arcs: thin dark circle segments, anti-aliased by distance
    for _ in range(int(rng.integers(0, params.hair_max + 1))):
        hx = rng.uniform(-0.3, 1.3) * w
        hy = rng.uniform(-0.3, 1.3) * h
        radius = rng.uniform(0.3, 1.2) * min(w, h)
        width = rng.uniform(0.6, 1.4)
        theta0 = rng.uniform(0.0, 2 * np.pi)
        span = rng.uniform(np.pi / 6, 5 * np.pi / 6)
        dark = rng.uniform(0.25, 0.55)
        dist = np.abs(np.hypot(xs - hx, ys - hy) - radius)
        ang = np.mod(np.arctan2(ys - hy, xs - hx) - theta0, 2 * np.pi)
        strand = np.clip(1.0 - dist / width, 0.0, 1.0) * (ang <= span)
        img = img - dark * strand[None]

    noise = rng.normal(0.0, rng.uniform(*params.noise_range), (3, h, w))
    img = np.clip(img + noise, 0.0, 1.0).astype(np.float32)
    return Tensor(img[np.newaxis]), Tensor(mask[np.newaxis, np.newaxis])


def generate_synthetic(params):
    """Deterministic list of SamplePairs; sample k uses stream (seed, k)."""
    samples = []
    for k in range(params.count):
        rng = np.random.default_rng([params.seed, k])
        image, mask = _synth_one(rng, params)
        samples.append(SamplePair(f"synth_{k:04d}", image, mask))
    return samples


# ---------------------------------------------------------------------------
# checkpoint container


def _pack_tensor(name, arr):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return b"".join(
        (
            struct.pack("<H", len(raw)),
            raw,
            struct.pack("<B", arr.ndim),
            struct.pack(f"<{arr.ndim}I", *arr.shape),
            arr.tobytes(),
        )
    )


def save_array_dump(path, name, arr):
    """Write one named float32 array in the checkpoint container layout.

    Used for raw probability-map dumps; the trailing config document is an
    empty JSON object.
    """
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<HI", CHECKPOINT_VERSION, 1),
        _pack_tensor(name, arr),
    ]
    blob = b"{}"
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    Path(path).write_bytes(b"".join(parts))


def load_array_dump(path):
    """Read back a single-array dump written by save_array_dump."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a container file")
    version, count = r.unpack("<HI", "header")
    if version != CHECKPOINT_VERSION or count != 1:
        raise CheckpointError(f"expected a single-tensor v{CHECKPOINT_VERSION} dump")
    (name_len,) = r.unpack("<H", "tensor name length")
    name = r.take(name_len, "tensor name").decode("utf-8")
    (rank,) = r.unpack("<B", f"rank of '{name}'")
    dims = r.unpack(f"<{rank}I", f"dims of '{name}'")
    size = int(np.prod(dims, dtype=np.int64)) if rank else 1
    arr = np.frombuffer(r.take(4 * size, f"data of '{name}'"), dtype="<f4").reshape(dims)
    return name, arr.copy()


def save_checkpoint(model, config, path):
    """Write the cascade's parameters plus its TrainConfig; bit-exact."""
    entries = list(model.named_parameters())
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(entries))]
    for name, p in entries:
        parts.append(_pack_tensor(name, p.data))
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    """Read a checkpoint back into (CascadeModel, TrainConfig).

    The model structure is rebuilt from the embedded config; every stored
    tensor must match it by name and shape.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version, count) = r.unpack("<HI", "header")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of '{name}'")
        dims = r.unpack(f"<{rank}I", f"dims of '{name}'")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(4 * size, f"data of '{name}'")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    (cfg_len,) = r.unpack("<I", "config length")
    cfg_blob = r.take(cfg_len, "config JSON")
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after config")
    try:
        config = TrainConfig.from_dict(json.loads(cfg_blob.decode("utf-8")))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"config JSON unreadable: {exc}") from None

    stages = []
    for s in range(config.stages):
        mode = "none" if s == 0 else config.fusion_mode
        cfg = UNetConfig(3, config.levels, config.channel_widths, mode)
        stage = build_stage(cfg, seed=0)
        prefix = f"stage{s + 1}."
        for pname, tensor_ in stage.named_parameters():
            full = prefix + pname
            if full not in tensors:
                raise CheckpointError(f"missing tensor '{full}'")
            stored = tensors.pop(full)
            if stored.shape != tensor_.data.shape:
                raise CheckpointError(
                    f"tensor '{full}' shape {stored.shape} != expected {tensor_.data.shape}"
                )
            tensor_.data = stored
        stages.append(stage)
    if tensors:
        raise CheckpointError(f"unexpected tensors in file: {sorted(tensors)}")
    return CascadeModel(stages), config
