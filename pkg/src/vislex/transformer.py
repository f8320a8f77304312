"""Multi-layer transformer fusing visual and text tokens, plus task heads.

Pre-norm residual blocks: x + attn(ln(x)) then x + mlp(ln(x)). No final
norm, so zeroing the residual-branch output projections makes the network
an exact identity. Masked key positions get a large negative logit bias,
which underflows to exactly zero attention weight after softmax.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError

MASK_BIAS = -1e9


def _linear_init(rng, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_transformer_params(
    c: int, n_layers: int, n_heads: int, seed: int, mlp_ratio: int = 4, dtype=np.float64
) -> dict[str, Tensor]:
    if c % n_heads != 0:
        raise DimensionError(f"model dim {c} not divisible by {n_heads} heads")
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def add_linear(name: str, fan_in: int, fan_out: int):
        params[f"{name}.w"] = Tensor(_linear_init(rng, fan_in, fan_out, dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)

    for i in range(n_layers):
        prefix = f"layer.{i}"
        for ln in ("ln1", "ln2"):
            params[f"{prefix}.{ln}.g"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
            params[f"{prefix}.{ln}.b"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        for proj in ("q", "k", "v", "o"):
            add_linear(f"{prefix}.attn.{proj}", c, c)
        add_linear(f"{prefix}.mlp.fc1", c, c * mlp_ratio)
        add_linear(f"{prefix}.mlp.fc2", c * mlp_ratio, c)
    return params


def init_head_params(
    c: int, vocab_size: int, k: int, seed: int, dtype=np.float64
) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, fan_out in (("mlm", vocab_size), ("mvm", k), ("itm", 1)):
        params[f"head.{name}.w"] = Tensor(_linear_init(rng, c, fan_out, dtype), requires_grad=True)
        params[f"head.{name}.b"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)
    return params


def _mask_bias(mask: np.ndarray, dtype) -> Tensor:
    # (B, n) validity -> (B, 1, 1, n) additive bias for attention logits
    bias = (1.0 - np.asarray(mask, dtype=dtype)) * dtype.type(MASK_BIAS)
    return Tensor(bias[:, None, None, :])


def multi_head_attention(
    x: Tensor, mask, params: dict[str, Tensor], n_heads: int, prefix: str = "attn",
    return_weights: bool = False,
):
    """Scaled dot-product attention with masking, heads concatenated.

    x is (n, c) or (B, n, c); mask is (n,) or (B, n) with 1 marking valid
    keys. Scaling is 1/sqrt(c/H).
    """
    single = x.data.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.data.shape)
    b, n, c = x.data.shape
    mask_arr = np.atleast_2d(np.asarray(mask))
    if mask_arr.shape[-1] != n:
        raise DimensionError(f"mask length {mask_arr.shape[-1]} != sequence length {n}")
    dh = c // n_heads

    def proj(name: str) -> Tensor:
        out = ad.matmul(x, params[f"{prefix}.{name}.w"]) + params[f"{prefix}.{name}.b"]
        heads = ad.reshape(out, (b, n, n_heads, dh))
        return ad.transpose(heads, (0, 2, 1, 3))  # (B, H, n, dh)

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    scores = scores + _mask_bias(mask_arr, x.dtype)
    weights = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(weights, v)  # (B, H, n, dh)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, c))
    out = ad.matmul(merged, params[f"{prefix}.o.w"]) + params[f"{prefix}.o.b"]
    if single:
        out = ad.reshape(out, (n, c))
    if return_weights:
        return out, weights
    return out


def forward(x: Tensor, mask, params: dict[str, Tensor], n_layers: int, n_heads: int) -> Tensor:
    """Run the pre-norm block stack; returns final hidden states.

    Input embeddings are expected to already carry position encodings and
    segment tags.
    """
    for i in range(n_layers):
        prefix = f"layer.{i}"
        normed = ad.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
        x = x + multi_head_attention(normed, mask, params, n_heads, prefix=f"{prefix}.attn")
        normed = ad.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
        h = ad.gelu(ad.matmul(normed, params[f"{prefix}.mlp.fc1.w"]) + params[f"{prefix}.mlp.fc1.b"])
        x = x + ad.matmul(h, params[f"{prefix}.mlp.fc2.w"]) + params[f"{prefix}.mlp.fc2.b"]
    return x


def heads(hidden: Tensor, n_visual: int, params: dict[str, Tensor]) -> dict:
    """Task logits for one joint sequence: (T,|vocab|), (l,k), scalar ITM."""
    n = hidden.data.shape[0]
    visual = ad.take(hidden, np.arange(n_visual))
    textual = ad.take(hidden, np.arange(n_visual, n))
    mlm = ad.matmul(textual, params["head.mlm.w"]) + params["head.mlm.b"]
    mvm = ad.matmul(visual, params["head.mvm.w"]) + params["head.mvm.b"]
    cls_vec = ad.take(hidden, np.array([n_visual]))  # [CLS] sits at index l
    itm = ad.reshape(ad.matmul(cls_vec, params["head.itm.w"]) + params["head.itm.b"], (1,))
    return {"mlm_logits": mlm, "mvm_logits": mvm, "itm_logit": itm}
