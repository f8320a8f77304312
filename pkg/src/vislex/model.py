"""Joint vision-language model: parameter registry and forward paths.

Parameter names are stable and documented in the README name table; the
checkpoint format stores tensors under exactly these names. Seeds for the
submodule initializers derive from the run seed with fixed offsets, so a
config+seed pair pins every weight.

The joint sequence places the visual block first, then the text block, so
the text [CLS] token sits at index l. Visual tokens get the 2-D sine
position code and segment tag 0; text tokens get the learned 1-D position
table and segment tag 1.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import dictionary as vd
from . import encoder as enc
from . import text as tx
from . import transformer as tf
from .autodiff import Tensor
from .config import TrainConfig
from .errors import DimensionError


class JointSequence:
    """One concatenated visual+text sequence with masks and segment tags."""

    def __init__(self, embeddings: Tensor, attn_mask: np.ndarray, n_visual: int):
        self.embeddings = embeddings
        self.attn_mask = attn_mask
        self.n_visual = n_visual
        n = embeddings.data.shape[-2]
        self.segments = np.concatenate(
            [np.zeros(n_visual, dtype=np.int64), np.ones(n - n_visual, dtype=np.int64)]
        )

    @property
    def cls_index(self) -> int:
        return self.n_visual


class JointModel:
    """Encoder + visual dictionary + cross-modal transformer + heads."""

    def __init__(self, cfg: TrainConfig, vocab: tx.Vocabulary):
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        dtype = np.float32 if cfg.dtype == "f32" else np.float64
        self.dtype = dtype
        seed = cfg.seed
        self.params: dict[str, Tensor] = {}
        self.params.update(enc.init_encoder_params(cfg.c, seed, dtype))
        self.params.update(
            tf.init_transformer_params(cfg.c, cfg.n_layers, cfg.n_heads, seed + 1, dtype=dtype)
        )
        self.params.update(tf.init_head_params(cfg.c, len(vocab), cfg.k, seed + 2, dtype=dtype))
        self.params.update(_init_embedding_params(cfg, len(vocab), seed + 3, dtype))
        self.codebook = vd.init_codebook(cfg.k, cfg.c, seed + 4, cfg.gamma, dtype)
        self._pe_cache: dict[tuple[int, int], np.ndarray] = {}

    # --- parameter groups -----------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def sgd_parameters(self) -> dict[str, Tensor]:
        """Encoder conv blocks only; the 1x1 projection belongs to AdamW."""
        names = enc.conv_block_param_names(self.params)
        return {n: self.params[n] for n in names}

    def adamw_parameters(self) -> dict[str, Tensor]:
        sgd_names = set(enc.conv_block_param_names(self.params))
        return {n: p for n, p in self.params.items() if n not in sgd_names}

    # --- forward pieces ---------------------------------------------------------

    def encode_images(self, images, frozen: bool = False) -> enc.VisualFeatureMap:
        return enc.encode(images, self.params, frozen=frozen)

    def visual_pe(self, grid_h: int, grid_w: int) -> np.ndarray:
        key = (grid_h, grid_w)
        if key not in self._pe_cache:
            self._pe_cache[key] = enc.position_encoding_2d(grid_h, grid_w, self.cfg.c).astype(
                self.dtype
            )
        return self._pe_cache[key]

    def visual_tokens(self, visual: Tensor, grid_h: int, grid_w: int) -> Tensor:
        """Add the 2-D sine position code and visual segment tag."""
        pe = Tensor(self.visual_pe(grid_h, grid_w))
        seg = ad.take(self.params["embed.segment"], np.array([0]))
        return visual + pe + ad.reshape(seg, (self.cfg.c,))

    def text_tokens(self, ids: np.ndarray) -> Tensor:
        """Word embeddings plus learned positions and text segment tag."""
        ids = np.atleast_2d(ids)
        b, t = ids.shape
        if t > self.cfg.max_len:
            raise DimensionError(f"text length {t} exceeds max_len {self.cfg.max_len}")
        words = ad.take(self.params["embed.word"], ids.reshape(-1))
        words = ad.reshape(words, (b, t, self.cfg.c))
        pos = ad.take(self.params["embed.text_pos"], np.arange(t))
        seg = ad.reshape(ad.take(self.params["embed.segment"], np.array([1])), (self.cfg.c,))
        return words + pos + seg

    def joint(self, visual: Tensor, ids: np.ndarray, text_mask: np.ndarray) -> JointSequence:
        """Concatenate prepared visual tokens with text token embeddings.

        visual: (B, l, c) already position/segment tagged; ids/text_mask:
        (B, T). All visual positions count as valid.
        """
        text = self.text_tokens(ids)
        b, l = visual.data.shape[0], visual.data.shape[1]
        x = ad.concat([visual, text], axis=1)
        mask = np.concatenate(
            [np.ones((b, l), dtype=np.int64), np.atleast_2d(text_mask)], axis=1
        )
        return JointSequence(embeddings=x, attn_mask=mask, n_visual=l)

    def forward(self, joint: JointSequence) -> Tensor:
        return tf.forward(
            joint.embeddings, joint.attn_mask, self.params, self.cfg.n_layers, self.cfg.n_heads
        )

    def heads(self, hidden: Tensor, n_visual: int) -> dict:
        return tf.heads(hidden, n_visual, self.params)

    def itm_logits(self, hidden: Tensor, n_visual: int) -> Tensor:
        """(B,) matching logits read at each sequence's [CLS] position."""
        b = hidden.data.shape[0]
        cls_vecs = ad.take(hidden, (np.arange(b), np.full(b, n_visual)))
        out = ad.matmul(cls_vecs, self.params["head.itm.w"]) + self.params["head.itm.b"]
        return ad.reshape(out, (b,))

    def visual_inputs(self, fmap: enc.VisualFeatureMap, use_vd: bool | None = None):
        """Quantize (or pass through) encoder features; returns (tokens, assignment).

        With use_vd the transformer consumes codebook embeddings under the
        straight-through gradient; otherwise it consumes the raw encoder
        features. Both paths then receive identical position encodings.
        """
        if use_vd is None:
            use_vd = self.cfg.use_vd
        assignment = vd.assign(fmap.features.data, self.codebook)
        if use_vd:
            tokens = vd.embed(fmap.features, assignment, self.codebook)
        else:
            tokens = fmap.features
        return tokens, assignment


def _init_embedding_params(
    cfg: TrainConfig, vocab_size: int, seed: int, dtype
) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(cfg.c)

    def table(shape):
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

    return {
        "embed.word": table((vocab_size, cfg.c)),
        "embed.text_pos": table((cfg.max_len, cfg.c)),
        "embed.segment": table((2, cfg.c)),
        "embed.visual_mask": table((cfg.c,)),
    }
