"""Gradient verification suite: every differentiable op plus the full
heads-over-transformer-over-quantizer-over-encoder composite.

The quantizer's argmin is piecewise constant, so the composite check uses
the straight-through surrogate with the barred term frozen at the base
point: v + const(q0 - v0). Its value and Jacobian at the base point equal
the real quantized path's, which is what the backward pass implements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dictionary as vd
from . import encoder as enc
from . import text as tx
from . import transformer as tf
from .autodiff import Tensor
from .config import TrainConfig
from .gradcheck import finite_diff_check
from .model import JointModel

N_CONFIGS = 5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool
    n_configs: int


def _margin(x: np.ndarray, eps: float = 5e-3) -> np.ndarray:
    """Push values away from kinks (relu) and ties (pooling argmax)."""
    x = x + np.where(np.abs(x) < eps, np.sign(x + 1e-12) * eps, 0.0)
    return x


def _op_checks(seed: int):
    r = np.random.default_rng(seed)
    bias = Tensor(r.standard_normal(4))
    other = Tensor(r.standard_normal((3, 4)))
    rhs = Tensor(r.standard_normal((4, 2)))
    rhs_b = Tensor(r.standard_normal((2, 4, 3)))
    gain, beta = Tensor(r.standard_normal(5)), Tensor(r.standard_normal(5))
    ce_targets = r.integers(0, 4, size=3)
    bce_targets = (r.random(6) > 0.5).astype(np.float64)
    conv_w = Tensor(r.standard_normal((4, 3, 3, 3)))
    conv_b = Tensor(r.standard_normal(4))
    st_values = r.standard_normal((4, 3))

    def conv_x(x):
        return ad.conv2d(x, conv_w, conv_b, stride=2, pad=1)

    def conv_weight(w):
        return ad.conv2d(Tensor(r2_img), w, conv_b, stride=2, pad=1)

    r2_img = r.standard_normal((1, 3, 6, 6))

    def st_surrogate(x):
        return x + Tensor(st_values)  # barred term held constant

    return {
        "add_broadcast": (lambda x: x + bias, (3, 4)),
        "mul": (lambda x: x * other, (3, 4)),
        "neg": (lambda x: -x, (5,)),
        "power": (lambda x: x ** 3, (4,)),
        "matmul": (lambda x: ad.matmul(x, rhs), (3, 4)),
        "matmul_batched": (lambda x: ad.matmul(x, rhs_b), (2, 3, 4)),
        "reshape": (lambda x: ad.reshape(x, (2, 6)), (3, 4)),
        "transpose": (lambda x: ad.transpose(x, (1, 0)), (3, 4)),
        "concat": (lambda x: ad.concat([x, x * 2.0], axis=0), (2, 3)),
        "take": (lambda x: ad.take(x, np.array([0, 2, 2])), (4, 3)),
        "sum": (lambda x: ad.tsum(x, axis=1), (3, 4)),
        "mean": (lambda x: ad.tmean(x, axis=0), (3, 4)),
        "relu": (lambda x: ad.relu(x * 1.0 + Tensor(_margin(np.zeros(6)))), (6,)),
        "gelu": (ad.gelu, (6,)),
        "tanh": (ad.tanh, (6,)),
        "exp": (ad.exp, (6,)),
        "log": (lambda x: ad.log(x * x + 0.5), (6,)),
        "sigmoid": (ad.sigmoid, (6,)),
        "softmax": (lambda x: ad.softmax(x, axis=-1), (3, 5)),
        "layer_norm": (lambda x: ad.layer_norm(x, gain, beta), (3, 5)),
        "cross_entropy": (lambda x: ad.cross_entropy_logits(x, ce_targets), (3, 4)),
        "bce_with_logits": (lambda x: ad.bce_with_logits(x, bce_targets), (6,)),
        "conv2d_x": (conv_x, (1, 3, 6, 6)),
        "conv2d_w": (conv_weight, (4, 3, 3, 3)),
        "maxpool2x2": (ad.maxpool2x2, (1, 2, 4, 4)),
        "straight_through_surrogate": (st_surrogate, (4, 3)),
    }


def _composite_setup(seed: int):
    cfg = TrainConfig(
        c=8, n_layers=1, n_heads=2, k=6, max_len=6, dtype="f64",
        epochs=2, decay_epochs=(1,), freeze_epochs=0, seed=seed,
    ).validate()
    vocab = tx.build_vocab(["a red circle", "a blue square above a green triangle"])
    model = JointModel(cfg, vocab)
    rng = np.random.default_rng(seed + 100)
    image = rng.random((3, 16, 16))  # one visual token at s=16
    seq = tx.tokenize("a red circle", vocab, cfg.max_len)
    return cfg, model, image, seq


def _composite_forward(params, model, image_t: Tensor, seq, barrier: np.ndarray):
    """encode -> surrogate quantize -> position/segment -> transformer -> heads."""
    cfg = model.cfg
    fmap = enc.encode(image_t, params)
    surrogate = fmap.features + Tensor(barrier)
    pe = Tensor(model.visual_pe(fmap.grid_h, fmap.grid_w))
    seg0 = ad.reshape(ad.take(params["embed.segment"], np.array([0])), (cfg.c,))
    visual_in = surrogate + pe + seg0

    words = ad.take(params["embed.word"], seq.ids)
    pos = ad.take(params["embed.text_pos"], np.arange(cfg.max_len))
    seg1 = ad.reshape(ad.take(params["embed.segment"], np.array([1])), (cfg.c,))
    text_in = words + pos + seg1

    x = ad.concat([visual_in, text_in], axis=0)
    mask = np.concatenate([np.ones(fmap.l, dtype=np.int64), seq.mask])
    hidden = tf.forward(x, mask, params, cfg.n_layers, cfg.n_heads)
    out = tf.heads(hidden, fmap.l, params)
    return ad.concat(
        [
            ad.reshape(out["mlm_logits"], (-1,)),
            ad.reshape(out["mvm_logits"], (-1,)),
            out["itm_logit"],
        ],
        axis=0,
    )


COMPOSITE_TARGETS = (
    "image",
    "encoder.conv1.b",
    "encoder.proj.w",
    "layer.0.attn.q.w",
    "embed.word",
    "head.itm.w",
)


def composite_check(seed: int, targets=COMPOSITE_TARGETS) -> dict[str, float]:
    cfg, model, image, seq = _composite_setup(seed)
    base_fmap = model.encode_images(image)
    assignment = vd.assign(base_fmap.features.data, model.codebook)
    q0 = model.codebook.entries.data[assignment.indices]
    barrier = q0 - base_fmap.features.data  # frozen sg term

    errs = {}
    for target in targets:
        if target == "image":
            def f(x):
                return _composite_forward(model.params, model, x, seq, barrier)
            x0 = Tensor(image.copy())
        else:
            def f(t, _name=target):
                return _composite_forward(
                    {**model.params, _name: t}, model, Tensor(image.copy()), seq, barrier
                )
            x0 = Tensor(model.params[target].data.copy())
        errs[target] = finite_diff_check(f, x0).max_rel_err
    return errs


def run_suite(n_configs: int = N_CONFIGS, tol: float = 1e-4) -> list[CheckResult]:
    """FD-verify each op and the composite over n_configs random setups."""
    results: list[CheckResult] = []
    names = list(_op_checks(0))
    for name in names:
        worst = 0.0
        ok = True
        for seed in range(n_configs):
            fn, shape = _op_checks(seed)[name]
            r = np.random.default_rng(seed * 977 + 13)
            x0 = r.standard_normal(shape)
            if name in ("maxpool2x2", "relu"):
                x0 = _margin(x0, eps=1e-2)
            report = finite_diff_check(fn, Tensor(x0), tol=tol)
            worst = max(worst, report.max_rel_err)
            ok = ok and report.passed
        results.append(CheckResult(f"op.{name}", worst, ok, n_configs))

    per_target_worst: dict[str, float] = {}
    for seed in range(n_configs):
        for target, err in composite_check(seed).items():
            per_target_worst[target] = max(per_target_worst.get(target, 0.0), err)
    for target, err in per_target_worst.items():
        results.append(CheckResult(f"composite.{target}", err, err < tol, n_configs))
    return results
