"""Frozen stand-in vision encoders.

Two seeded, never-trained encoders emulate the split between an
appearance-oriented embedding and a geometry-oriented one:

* the **semantic encoder** projects each patch of the red/green channels
  through a fixed random linear map plus a positional offset. It is blind by
  construction to the blue channel, which the synthetic scenes use as their
  geometry cue -- a deliberately lossy, instance-level embedding.
* the **geometry encoder** reads only the blue channel through a stack of
  frozen token-mixing blocks and exposes every block's output, so downstream
  fusion can tap any subset of the deeper blocks.

Both produce the same token count for the same config, which the interleaved
fusion step requires.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError
from .tensor import Tensor
from .util import rng_for

#: Image channel carrying the geometry cue of synthetic scenes. The semantic
#: encoder never reads it; the geometry encoder reads nothing else.
GEOMETRY_CHANNEL = 2
SEMANTIC_CHANNELS = (0, 1)


@dataclass(frozen=True)
class EncoderConfig:
    """Shared geometry of the two encoder stubs."""

    image_side: int = 32
    patch_size: int = 8
    d_sem: int = 32
    d_geo: int = 32
    n_blocks: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.image_side <= 0 or self.patch_size <= 0:
            raise ContractError("image_side and patch_size must be positive")
        if self.image_side % self.patch_size != 0:
            raise ContractError("image_side must be divisible by patch_size")
        if self.n_blocks < 4:
            raise ContractError("geometry encoder needs at least 4 blocks")

    @property
    def n_tokens(self) -> int:
        side = self.image_side // self.patch_size
        return side * side


def validate_image(img: np.ndarray) -> np.ndarray:
    """Check the H x W x 3, values-in-[0,1] image contract."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"image must be H x W x 3, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DataError("image is empty")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError("image values must be finite and within [0, 1]")
    return arr


def resize_to_square(img: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize to side x side.

    Uses the half-pixel-center convention: output pixel centers are mapped
    back to source coordinates ``(i + 0.5) * src / dst - 0.5`` and clamped,
    so a same-size resize is an exact identity.
    """
    arr = validate_image(img)
    if side <= 0:
        raise DataError("target side must be positive")
    h, w = arr.shape[:2]

    def axis_weights(src: int, dst: int):
        coords = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0.0, src - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        frac = coords - lo
        return lo, hi, frac

    y0, y1, fy = axis_weights(h, side)
    x0, x1, fx = axis_weights(w, side)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(out, 0.0, 1.0)


def patchify(img: np.ndarray, channels: tuple[int, ...], patch: int) -> np.ndarray:
    """Flatten non-overlapping patches of the chosen channels into rows.

    Returns (n_tokens, patch*patch*len(channels)); tokens in row-major patch
    order, which is the "original spatial order" preserved by interleaving.
    """
    side = img.shape[0]
    grid = side // patch
    x = img[:, :, list(channels)]
    x = x.reshape(grid, patch, grid, patch, len(channels))
    x = x.transpose(0, 2, 1, 3, 4).reshape(grid * grid, patch * patch * len(channels))
    return x


@dataclass
class BlockFeatures:
    """Per-block token features from the geometry encoder."""

    blocks: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not self.blocks:
            raise ContractError("BlockFeatures requires at least one block")
        shape = self.blocks[0].shape
        if any(b.shape != shape for b in self.blocks):
            raise ContractError("all blocks must share token count and feature dim")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


class SemanticEncoder:
    """Per-patch random projection of the appearance channels, plus a fixed
    positional offset. Holds no trainable state."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        rng = rng_for(cfg.seed, "sem-encoder")
        fan_in = cfg.patch_size * cfg.patch_size * len(SEMANTIC_CHANNELS)
        self.proj = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, cfg.d_sem))
        self.pos = rng.normal(0.0, 0.1, (cfg.n_tokens, cfg.d_sem))

    def encode(self, img: np.ndarray) -> Tensor:
        arr = validate_image(img)
        if arr.shape[0] != self.cfg.image_side or arr.shape[1] != self.cfg.image_side:
            raise ContractError(
                f"expected a {self.cfg.image_side}x{self.cfg.image_side} image, got {arr.shape[:2]}")
        tokens = patchify(arr, SEMANTIC_CHANNELS, self.cfg.patch_size) @ self.proj + self.pos
        return Tensor(tokens)

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {"encoder.sem.proj": self.proj, "encoder.sem.pos": self.pos}


class GeometryEncoder:
    """Stack of frozen token-mixing blocks over the geometry channel.

    Each block applies a channel mix, a token mix, a bias, and tanh; every
    block output is retained so callers choose which depths to tap. A zero
    image propagates biases only, giving a deterministic fixed output.
    """

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        rng = rng_for(cfg.seed, "geo-encoder")
        fan_in = cfg.patch_size * cfg.patch_size
        self.in_proj = rng.normal(0.0, 3.0 / np.sqrt(fan_in), (fan_in, cfg.d_geo))
        self.blocks: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        for _ in range(cfg.n_blocks):
            tmix = rng.normal(0.0, 1.1 / np.sqrt(cfg.n_tokens), (cfg.n_tokens, cfg.n_tokens))
            wch = rng.normal(0.0, 1.1 / np.sqrt(cfg.d_geo), (cfg.d_geo, cfg.d_geo))
            bias = rng.normal(0.0, 0.05, cfg.d_geo)
            self.blocks.append((tmix, wch, bias))

    def encode(self, img: np.ndarray) -> BlockFeatures:
        arr = validate_image(img)
        if arr.shape[0] != self.cfg.image_side or arr.shape[1] != self.cfg.image_side:
            raise ContractError(
                f"expected a {self.cfg.image_side}x{self.cfg.image_side} image, got {arr.shape[:2]}")
        x = patchify(arr, (GEOMETRY_CHANNEL,), self.cfg.patch_size) @ self.in_proj
        outs = []
        for tmix, wch, bias in self.blocks:
            x = np.tanh(tmix @ (x @ wch) + bias)
            outs.append(Tensor(x))
        return BlockFeatures(outs)

    def param_arrays(self) -> dict[str, np.ndarray]:
        out = {"encoder.geo.in_proj": self.in_proj}
        for i, (tmix, wch, bias) in enumerate(self.blocks):
            out[f"encoder.geo.blk{i}.tmix"] = tmix
            out[f"encoder.geo.blk{i}.wch"] = wch
            out[f"encoder.geo.blk{i}.bias"] = bias
        return out


# -- portable pixel format I/O ------------------------------------------


def save_ppm(img: np.ndarray, path) -> None:
    """Write an image as binary PPM (P6, 8-bit)."""
    arr = validate_image(img)
    data = np.round(arr * 255.0).astype(np.uint8)
    header = f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6, 8-bit) into a float image in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(raw):
            raise DataError("truncated PPM header")
        if raw[pos:pos + 1].isspace():
            pos += 1
            continue
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise DataError("only binary P6 PPM is supported")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise DataError("only 8-bit PPM is supported")
    need = width * height * 3
    body = raw[pos:pos + need]
    if len(body) != need:
        raise DataError("truncated PPM payload")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float64) / 255.0
