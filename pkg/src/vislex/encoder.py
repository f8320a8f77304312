"""Trainable whole-image convolutional encoder.

Three stride-2 conv blocks (widths 16, 32, c) followed by a 1x1 projection
to c channels and a 2x2 max pool, for a total downsample factor of 16. The
1x1 + pool tail is kept separate from the blocks because the cold-start
freeze stops gradients through the blocks while the projection keeps
training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

DOWNSAMPLE = 16
CONV_BLOCK_PREFIXES = ("conv1", "conv2", "conv3")


def token_grid(height: int, width: int, s: int) -> tuple[int, int]:
    """Token grid dims for an image: ceil(height/s) x ceil(width/s)."""
    return math.ceil(height / s), math.ceil(width / s)


def joint_sequence_length(height: int, width: int, s: int, text_len: int) -> int:
    """Visual tokens plus text tokens for one image-text pair."""
    gh, gw = token_grid(height, width, s)
    return gh * gw + text_len


@dataclass
class VisualFeatureMap:
    """Grid of visual feature vectors with their spatial coordinates."""

    grid_h: int
    grid_w: int
    c: int
    features: Tensor  # (l, c) for one image, (B, l, c) for a batch
    coords: list[tuple[int, int]] = field(default_factory=list)

    @property
    def l(self) -> int:
        return self.grid_h * self.grid_w


def init_encoder_params(c: int, seed: int, dtype=np.float64) -> dict[str, Tensor]:
    """Kaiming-uniform fan-in init, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    widths = [(16, 3, 3), (32, 16, 3), (c, 32, 3), (c, c, 1)]
    names = ["conv1", "conv2", "conv3", "proj"]
    params: dict[str, Tensor] = {}
    for name, (cout, cin, k) in zip(names, widths):
        fan_in = cin * k * k
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
        params[f"encoder.{name}.w"] = Tensor(w, requires_grad=True)
        params[f"encoder.{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return params


def conv_block_param_names(params: dict[str, Tensor]) -> list[str]:
    """Names of the freezable conv-block parameters (everything but proj)."""
    return [
        n for n in params
        if n.startswith("encoder.") and n.split(".")[1] in CONV_BLOCK_PREFIXES
    ]


def _pad_to_multiple(images: np.ndarray, s: int) -> np.ndarray:
    h, w = images.shape[-2], images.shape[-1]
    ph = (-h) % s
    pw = (-w) % s
    if ph == 0 and pw == 0:
        return images
    pad = [(0, 0)] * (images.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(images, pad)


def encode(image, params: dict[str, Tensor], frozen: bool = False) -> VisualFeatureMap:
    """Run the encoder on one image (3,H,W) or a batch (B,3,H,W).

    Pixel values are expected in [0,1]. Sides not divisible by the
    downsample factor are zero-padded bottom/right. With frozen=True the
    conv blocks are placed behind a stop-gradient barrier; the 1x1
    projection stays trainable.
    """
    if isinstance(image, Tensor):
        x = image
        batched = x.data.ndim == 4
        if (x.data.shape[-2] % DOWNSAMPLE) or (x.data.shape[-1] % DOWNSAMPLE):
            raise DimensionError(
                f"tensor input must be pre-padded to a multiple of {DOWNSAMPLE}, got {x.data.shape}"
            )
    else:
        arr = np.asarray(image)
        batched = arr.ndim == 4
        if arr.ndim not in (3, 4):
            raise DimensionError(f"expected (3,H,W) or (B,3,H,W), got {arr.shape}")
        if arr.shape[-2] == 0 or arr.shape[-1] == 0:
            raise DimensionError(f"zero-sized image: {arr.shape}")
        x = Tensor(_pad_to_multiple(arr, DOWNSAMPLE))
    if x.data.shape[-3] != 3:
        raise DimensionError(f"expected 3 input channels, got {x.data.shape}")
    if not batched:
        x = ad.reshape(x, (1,) + x.data.shape)

    def p(name: str) -> Tensor:
        t = params[f"encoder.{name}"]
        if frozen and name.split(".")[0] in CONV_BLOCK_PREFIXES:
            return ad.stop_gradient(t)
        return t

    h = ad.relu(ad.conv2d(x, p("conv1.w"), p("conv1.b"), stride=2, pad=1))
    h = ad.relu(ad.conv2d(h, p("conv2.w"), p("conv2.b"), stride=2, pad=1))
    h = ad.relu(ad.conv2d(h, p("conv3.w"), p("conv3.b"), stride=2, pad=1))
    h = ad.conv2d(h, p("proj.w"), p("proj.b"), stride=1, pad=0)
    h = ad.maxpool2x2(h)

    b, c, gh, gw = h.data.shape
    feats = ad.reshape(ad.transpose(h, (0, 2, 3, 1)), (b, gh * gw, c))
    if not batched:
        feats = ad.reshape(feats, (gh * gw, c))
    coords = [(r, col) for r in range(gh) for col in range(gw)]
    return VisualFeatureMap(grid_h=gh, grid_w=gw, c=c, features=feats, coords=coords)


def position_encoding_2d(grid_h: int, grid_w: int, c: int) -> np.ndarray:
    """Sine/cosine grid position codes, (grid_h*grid_w, c), row-major.

    The first c/2 channels encode the row index, the last c/2 the column,
    each as interleaved sin/cos over geometric frequencies with base 10000.
    """
    if c % 4 != 0:
        raise ConfigError(f"position encoding dim must be divisible by 4, got {c}")
    half = c // 2
    freqs = 10000.0 ** (np.arange(0, half, 2) / half)  # (half/2,)

    def encode_axis(positions: np.ndarray) -> np.ndarray:
        angles = positions[:, None] / freqs[None, :]
        out = np.zeros((positions.size, half))
        out[:, 0::2] = np.sin(angles)
        out[:, 1::2] = np.cos(angles)
        return out

    rows = np.repeat(np.arange(grid_h), grid_w).astype(np.float64)
    cols = np.tile(np.arange(grid_w), grid_h).astype(np.float64)
    return np.concatenate([encode_axis(rows), encode_axis(cols)], axis=1)
