"""Pre-training batch construction and the MLM + MVM + ITM objectives.

Each image contributes four pairs per batch: its two captions (matched,
label 1) and two captions sampled from other images (unmatched, label 0).
The image runs through the encoder once; all four pairs reuse the result.
Masking applies to matched pairs only.

Visual masking is index-complete: a codebook index is sampled from the
image's assignment and every token mapped to it is replaced by the learned
visual mask vector, which stops the model from copying labels off identical
neighbors. Labels are the pre-mask assignment indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dictionary as vd
from . import text as tx
from .autodiff import Tensor
from .errors import ContractError, SamplingError
from .model import JointModel

PAIRS_PER_IMAGE = 4  # two positive, two negative


def sample_mvm_indices(
    assignment: vd.Assignment, rng: np.random.Generator, m_idx: int = 1
) -> tuple[np.ndarray, dict[int, int]]:
    """Pick m_idx distinct used codebook indices; mask their whole groups.

    Returns the masked token positions and a position -> index label map.
    If fewer than m_idx distinct indices exist, masks all of them.
    """
    if m_idx < 1:
        raise ContractError(f"m_idx must be >= 1, got {m_idx}")
    used = assignment.distinct_indices()
    if used.size == 0:
        raise ContractError("cannot mask an empty assignment")
    chosen = rng.choice(used, size=min(m_idx, used.size), replace=False)
    positions = []
    labels: dict[int, int] = {}
    for j in chosen:
        group = assignment.inverse_map[int(j)]
        positions.extend(int(p) for p in group)
        for p in group:
            labels[int(p)] = int(j)
    return np.array(sorted(positions), dtype=np.int64), labels


def mvm_mask(
    assignment: vd.Assignment,
    visual_emb: Tensor,
    rng: np.random.Generator,
    mask_vector: Tensor,
    m_idx: int = 1,
) -> tuple[Tensor, dict[int, int]]:
    """Replace every embedding in the sampled index groups with the mask vector."""
    positions, labels = sample_mvm_indices(assignment, rng, m_idx)
    l = visual_emb.data.shape[0]
    keep = np.ones((l, 1), dtype=visual_emb.dtype)
    keep[positions] = 0.0
    keep_t = Tensor(keep)
    masked = visual_emb * keep_t + mask_vector * (Tensor(np.ones_like(keep)) - keep_t)
    return masked, labels


@dataclass
class PretrainBatch:
    """Flattened pair-level batch over a block of images.

    Text ids are post-MLM; keep==0 marks visually masked token slots. The
    encoded feature map rides along so the loss can reuse the single
    encoder forward, and so the momentum update can read detached features.
    """

    batch_id: str
    fmap: object                      # VisualFeatureMap over the image block
    assignment: vd.Assignment         # over all image tokens, row-major
    visual_tokens: Tensor             # (n_images, l, c), quantized or raw
    pair_image: np.ndarray            # (B,) image index per pair
    text_ids: np.ndarray              # (B, T)
    text_mask: np.ndarray             # (B, T)
    itm_labels: np.ndarray            # (B,) in {0, 1}
    mlm_pair: np.ndarray              # positions of masked text tokens
    mlm_pos: np.ndarray
    mlm_labels: np.ndarray
    mvm_pair: np.ndarray              # positions of masked visual tokens
    mvm_pos: np.ndarray
    mvm_labels: np.ndarray
    keep: np.ndarray                  # (B, l, 1) 1=keep, 0=masked
    grid: tuple[int, int] = (0, 0)
    encoder_calls: int = 1


def build_pretrain_batch(
    images: np.ndarray,
    pos_captions: list[tuple[str, str]],
    neg_captions: list[tuple[str, str]],
    model: JointModel,
    rng: np.random.Generator,
    frozen: bool = False,
    batch_id: str = "",
    use_vd: bool | None = None,
) -> PretrainBatch:
    """Assemble a four-pairs-per-image batch around one encoder forward.

    images: (n, 3, H, W) float block. pos_captions[i] are image i's two
    matched captions; neg_captions[i] two captions from other images. A
    negative equal to one of the image's positives is a sampling error.
    """
    cfg = model.cfg
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    n_images = images.shape[0]
    for i in range(n_images):
        for negative in neg_captions[i]:
            if negative in pos_captions[i]:
                raise SamplingError(
                    f"negative caption duplicates a positive for image {i}: {negative!r}"
                )

    fmap = model.encode_images(images, frozen=frozen)  # one forward for the block
    l = fmap.l
    visual_tokens, assignment = model.visual_inputs(fmap, use_vd=use_vd)
    per_image_indices = assignment.indices.reshape(n_images, l)

    pair_image = np.repeat(np.arange(n_images), PAIRS_PER_IMAGE)
    n_pairs = n_images * PAIRS_PER_IMAGE
    itm_labels = np.tile(np.array([1, 1, 0, 0], dtype=np.int64), n_images)

    text_ids = np.zeros((n_pairs, cfg.max_len), dtype=np.int64)
    text_mask = np.zeros((n_pairs, cfg.max_len), dtype=np.int64)
    mlm_pair, mlm_pos, mlm_labels = [], [], []
    mvm_pair, mvm_pos, mvm_labels = [], [], []
    keep = np.ones((n_pairs, l, 1), dtype=model.dtype)

    for i in range(n_images):
        image_assignment = vd.Assignment(
            indices=per_image_indices[i],
            inverse_map={int(j): np.flatnonzero(per_image_indices[i] == j)
                         for j in np.unique(per_image_indices[i])},
        )
        captions = list(pos_captions[i]) + list(neg_captions[i])
        for slot, caption in enumerate(captions):
            p = i * PAIRS_PER_IMAGE + slot
            seq = tx.tokenize(caption, model.vocab, cfg.max_len)
            positive = slot < 2
            if positive:
                seq, labels = tx.mlm_mask(seq, cfg.mlm_p, rng, len(model.vocab))
                for pos, original in labels.items():
                    mlm_pair.append(p)
                    mlm_pos.append(pos)
                    mlm_labels.append(original)
                positions, vlabels = sample_mvm_indices(image_assignment, rng, cfg.m_idx)
                keep[p, positions, 0] = 0.0
                for pos in positions:
                    mvm_pair.append(p)
                    mvm_pos.append(int(pos))
                    mvm_labels.append(vlabels[int(pos)])
            text_ids[p] = seq.ids
            text_mask[p] = seq.mask

    return PretrainBatch(
        batch_id=batch_id,
        fmap=fmap,
        assignment=assignment,
        visual_tokens=visual_tokens,
        pair_image=pair_image,
        text_ids=text_ids,
        text_mask=text_mask,
        itm_labels=itm_labels,
        mlm_pair=np.array(mlm_pair, dtype=np.int64),
        mlm_pos=np.array(mlm_pos, dtype=np.int64),
        mlm_labels=np.array(mlm_labels, dtype=np.int64),
        mvm_pair=np.array(mvm_pair, dtype=np.int64),
        mvm_pos=np.array(mvm_pos, dtype=np.int64),
        mvm_labels=np.array(mvm_labels, dtype=np.int64),
        keep=keep,
        grid=(fmap.grid_h, fmap.grid_w),
    )


@dataclass
class PretrainLosses:
    total: Tensor
    mlm: float
    mvm: float
    itm: float
    itm_logits: np.ndarray = field(repr=False, default=None)
    itm_labels: np.ndarray = field(repr=False, default=None)

    def as_floats(self) -> tuple[float, float, float, float]:
        return float(self.total.item()), self.mlm, self.mvm, self.itm


def pretrain_loss(batch: PretrainBatch, model: JointModel) -> PretrainLosses:
    """Total = MLM + MVM + ITM with equal weights; empty terms contribute 0."""
    cfg = model.cfg
    l = batch.keep.shape[1]
    zero = Tensor(np.zeros((), dtype=model.dtype))

    # per-pair visual tokens: gather the shared image block, then mask slots
    pair_visual = ad.take(batch.visual_tokens, batch.pair_image)
    keep_t = Tensor(batch.keep)
    inv_keep = Tensor(np.ones_like(batch.keep) - batch.keep)
    masked_visual = pair_visual * keep_t + model.params["embed.visual_mask"] * inv_keep
    visual_in = model.visual_tokens(masked_visual, *batch.grid)

    joint = model.joint(visual_in, batch.text_ids, batch.text_mask)
    hidden = model.forward(joint)

    if batch.mlm_pair.size:
        vecs = ad.take(hidden, (batch.mlm_pair, l + batch.mlm_pos))
        logits = ad.matmul(vecs, model.params["head.mlm.w"]) + model.params["head.mlm.b"]
        mlm = ad.cross_entropy_logits(logits, batch.mlm_labels)
    else:
        mlm = zero
    if batch.mvm_pair.size:
        vecs = ad.take(hidden, (batch.mvm_pair, batch.mvm_pos))
        logits = ad.matmul(vecs, model.params["head.mvm.w"]) + model.params["head.mvm.b"]
        mvm = ad.cross_entropy_logits(logits, batch.mvm_labels)
    else:
        mvm = zero

    itm_logits = model.itm_logits(hidden, l)
    itm = ad.bce_with_logits(itm_logits, batch.itm_labels.astype(model.dtype))

    total = mlm + mvm + itm
    return PretrainLosses(
        total=total,
        mlm=float(mlm.item()),
        mvm=float(mvm.item()),
        itm=float(itm.item()),
        itm_logits=itm_logits.data.copy(),
        itm_labels=batch.itm_labels,
    )
