"""Fine-tuning and evaluation on top of a pre-trained checkpoint.

Retrieval reuses the matching head as a binary classifier: in each
fine-tuning mini-batch of t aligned pairs, every image takes the other t-1
captions as negatives, giving a t x t grid with identity labels. Evaluation
scores every image-caption pair exhaustively and ranks with stable id-order
tie-breaks.

Fine-tuning feeds raw encoder features to the transformer by default
(use_vd=false); flipping the flag swaps in the quantized embeddings while
everything else, position encodings included, stays identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import data as ds
from . import report
from . import text as tx
from .autodiff import Tensor, backward
from .config import TrainConfig
from .encoder import DOWNSAMPLE
from .errors import ConfigError, DataError, UsageError
from .model import JointModel
from .optim import AdamWState, SgdState, adamw_step, sgd_step, zero_grads
from .train import epoch_rng

FT_SEED_STREAM = 7_001  # keeps fine-tune rng disjoint from pre-training epochs


# --- shared forward helpers -----------------------------------------------------

def _tokenize_block(model: JointModel, texts: list[str]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.zeros((len(texts), model.cfg.max_len), dtype=np.int64)
    masks = np.zeros_like(ids)
    for i, caption in enumerate(texts):
        seq = tx.tokenize(caption, model.vocab, model.cfg.max_len)
        ids[i] = seq.ids
        masks[i] = seq.mask
    return ids, masks


def _pair_logits(
    model: JointModel,
    visual_tokens: Tensor,
    grid: tuple[int, int],
    image_rows: np.ndarray,
    ids: np.ndarray,
    masks: np.ndarray,
) -> Tensor:
    """ITM logits for pairs (image_rows[p], text row p)."""
    pair_visual = ad.take(visual_tokens, image_rows)
    visual_in = model.visual_tokens(pair_visual, *grid)
    joint = model.joint(visual_in, ids, masks)
    hidden = model.forward(joint)
    return model.itm_logits(hidden, joint.n_visual)


def _encode_block(model: JointModel, images: np.ndarray, use_vd: bool, frozen: bool = False):
    fmap = model.encode_images(images, frozen=frozen)
    tokens, assignment = model.visual_inputs(fmap, use_vd=use_vd)
    return fmap, tokens, assignment


# --- retrieval fine-tuning ------------------------------------------------------

def finetune_retrieval(
    model: JointModel,
    items: list[ds.CaptionedImage],
    cfg: TrainConfig,
    log=None,
) -> list[dict]:
    """Binary-classification fine-tuning over aligned/unaligned pair grids."""
    t = cfg.ft_batch_pairs
    pairs = [(i, cap) for i, item in enumerate(items) for cap in item.captions]
    pairs = pairs[: cfg.ft_max_pairs]
    if t < 2:
        raise ConfigError("retrieval fine-tuning needs t >= 2 pairs per mini-batch")
    if t > len(pairs):
        raise ConfigError(f"mini-batch t={t} exceeds dataset size {len(pairs)}")
    use_vd = cfg.use_vd
    sgd_state, adamw_state = SgdState(), AdamWState()
    history = []
    for epoch in range(cfg.ft_epochs):
        rng = epoch_rng(cfg.seed, FT_SEED_STREAM + epoch)
        scale = 0.5 ** sum(1 for d in cfg.ft_halve_epochs if epoch >= d)
        order = rng.permutation(len(pairs))
        loss_sum, correct, total, steps = 0.0, 0, 0, 0
        for start in range(0, len(order) - t + 1, t):
            chunk = [pairs[i] for i in order[start: start + t]]
            image_idx = [c[0] for c in chunk]
            images = np.stack(
                [ds.image_to_float(items[i].pixels, dtype=model.dtype) for i in image_idx]
            )
            fmap, tokens, _ = _encode_block(model, images, use_vd)
            gh, gw = fmap.grid_h, fmap.grid_w
            ids, masks = _tokenize_block(model, [c[1] for c in chunk])
            rows = np.repeat(np.arange(t), t)
            cols = np.tile(np.arange(t), t)
            logits = _pair_logits(model, tokens, (gh, gw), rows, ids[cols], masks[cols])
            labels = (rows == cols).astype(model.dtype)
            loss = ad.bce_with_logits(logits, labels)
            backward(loss)
            sgd_step(model.sgd_parameters(), sgd_state,
                     lr=cfg.lr_encoder * scale, wd=cfg.wd_encoder)
            adamw_step(model.adamw_parameters(), adamw_state,
                       lr=cfg.lr_transformer * scale, wd=cfg.wd_transformer)
            zero_grads(model.params)
            loss_sum += float(loss.item())
            correct += int(((logits.data > 0) == (labels > 0.5)).sum())
            total += labels.size
            steps += 1
        row = {"epoch": epoch, "loss": loss_sum / max(steps, 1),
               "pair_acc": correct / max(total, 1)}
        history.append(row)
        if log:
            log(f"ft epoch {epoch}: loss {row['loss']:.4f} pair_acc {row['pair_acc']:.3f}")
    return history


# --- retrieval evaluation -------------------------------------------------------

@dataclass
class RetrievalEvalSet:
    images: np.ndarray            # (N, 3, H, W) float
    captions: list[str]           # length 2N, grouped per image
    caption_image: np.ndarray     # (2N,) image row of each caption


def make_eval_set(items: list[ds.CaptionedImage], dtype=np.float32) -> RetrievalEvalSet:
    images = np.stack([ds.image_to_float(item.pixels, dtype=dtype) for item in items])
    captions, owners = [], []
    for row, item in enumerate(items):
        for cap in item.captions:
            captions.append(cap)
            owners.append(row)
    return RetrievalEvalSet(
        images=images, captions=captions, caption_image=np.array(owners, dtype=np.int64)
    )


def score_all_pairs(
    model: JointModel, eval_set: RetrievalEvalSet, use_vd: bool | None = None,
    chunk: int = 512,
) -> np.ndarray:
    """(N images x M captions) matching scores; higher means better aligned."""
    if use_vd is None:
        use_vd = model.cfg.use_vd
    n = eval_set.images.shape[0]
    m = len(eval_set.captions)
    ids, masks = _tokenize_block(model, eval_set.captions)
    scores = np.zeros((n, m), dtype=np.float64)
    with ad.no_grad():
        fmap, tokens, _ = _encode_block(model, eval_set.images, use_vd)
        gh, gw = fmap.grid_h, fmap.grid_w
        pair_rows = np.repeat(np.arange(n), m)
        pair_cols = np.tile(np.arange(m), n)
        for start in range(0, pair_rows.size, chunk):
            rows = pair_rows[start: start + chunk]
            cols = pair_cols[start: start + chunk]
            logits = _pair_logits(model, tokens, (gh, gw), rows, ids[cols], masks[cols])
            scores[rows, cols] = logits.data
    return scores


def recall_at_k(ranks: np.ndarray, ks) -> dict[int, float]:
    return {k: float((ranks <= k).mean()) for k in ks}


def eval_retrieval(
    model: JointModel, eval_set: RetrievalEvalSet, ks=(1, 5, 10),
    use_vd: bool | None = None, scores: np.ndarray | None = None,
) -> dict[str, float]:
    """Recall@K for text retrieval (rank captions per image) and image
    retrieval (rank images per caption); stable id-order tie-breaks."""
    if scores is None:
        scores = score_all_pairs(model, eval_set, use_vd=use_vd)
    n, m = scores.shape

    tr_ranks = np.zeros(n, dtype=np.int64)
    for i in range(n):
        order = np.argsort(-scores[i], kind="stable")
        own = np.flatnonzero(eval_set.caption_image[order] == i)
        tr_ranks[i] = own.min() + 1  # best-ranked ground-truth caption
    ir_ranks = np.zeros(m, dtype=np.int64)
    for j in range(m):
        order = np.argsort(-scores[:, j], kind="stable")
        ir_ranks[j] = int(np.flatnonzero(order == eval_set.caption_image[j])[0]) + 1

    out = {}
    for k, value in recall_at_k(tr_ranks, ks).items():
        out[f"tr_r@{k}"] = value
    for k, value in recall_at_k(ir_ranks, ks).items():
        out[f"ir_r@{k}"] = value
    return out


def write_eval_report(metrics: dict[str, float], out_dir) -> None:
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["metric\tvalue"] + [f"{k}\t{v:.6f}" for k, v in metrics.items()]
    tsv = out_dir / "retrieval.tsv"
    tsv.write_text("\n".join(lines) + "\n", encoding="utf-8")
    report.render_retrieval_figure(tsv, out_dir)


# --- classification heads -------------------------------------------------------

@dataclass
class ClassifyExample:
    image: np.ndarray                 # (3, H, W) float
    text: str
    label: int
    image2: np.ndarray | None = None  # second image for paired mode


def init_classifier_head(
    c: int, n_classes: int, mode: str, seed: int, dtype=np.float64
) -> dict[str, Tensor]:
    if mode not in ("single", "paired"):
        raise ConfigError(f"classifier mode must be single or paired, got {mode!r}")
    c_in = c if mode == "single" else 2 * c
    rng = np.random.default_rng(seed)

    def linear(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype),
                      requires_grad=True)

    return {
        "cls.fc1.w": linear(c_in, c),
        "cls.fc1.b": Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
        "cls.fc2.w": Tensor(np.zeros((c, n_classes), dtype=dtype), requires_grad=True),
        "cls.fc2.b": Tensor(np.zeros(n_classes, dtype=dtype), requires_grad=True),
    }


def classifier_logits(
    model: JointModel, head: dict[str, Tensor], examples: list[ClassifyExample],
    mode: str, use_vd: bool = False,
) -> Tensor:
    """[CLS] features through the MLP head; paired mode concatenates two
    forwards."""

    def cls_vectors(images: np.ndarray, texts: list[str]) -> Tensor:
        fmap, tokens, _ = _encode_block(model, images, use_vd)
        ids, masks = _tokenize_block(model, texts)
        b = images.shape[0]
        visual_in = model.visual_tokens(tokens, fmap.grid_h, fmap.grid_w)
        joint = model.joint(visual_in, ids, masks)
        hidden = model.forward(joint)
        return ad.take(hidden, (np.arange(b), np.full(b, joint.n_visual)))

    texts = [e.text for e in examples]
    first = np.stack([e.image for e in examples]).astype(model.dtype)
    feats = cls_vectors(first, texts)
    if mode == "paired":
        if any(e.image2 is None for e in examples):
            raise DataError("paired mode requires image2 on every example")
        second = np.stack([e.image2 for e in examples]).astype(model.dtype)
        feats = ad.concat([feats, cls_vectors(second, texts)], axis=1)
    h = ad.gelu(ad.matmul(feats, head["cls.fc1.w"]) + head["cls.fc1.b"])
    return ad.matmul(h, head["cls.fc2.w"]) + head["cls.fc2.b"]


def finetune_classify(
    model: JointModel,
    examples: list[ClassifyExample],
    mode: str,
    n_classes: int,
    cfg: TrainConfig,
    epochs: int = 5,
    batch_size: int = 16,
    binary_ce: bool = False,
    log=None,
) -> tuple[dict[str, Tensor], list[dict]]:
    """Train an MLP head (plus the backbone) on labeled tuples."""
    for e in examples:
        if not 0 <= e.label < n_classes:
            raise DataError(f"label {e.label} out of range [0, {n_classes})")
    head = init_classifier_head(model.cfg.c, n_classes, mode, cfg.seed, model.dtype)
    sgd_state, adamw_state = SgdState(), AdamWState()
    history = []
    for epoch in range(epochs):
        rng = epoch_rng(cfg.seed, FT_SEED_STREAM + 500 + epoch)
        order = rng.permutation(len(examples))
        loss_sum, correct, steps = 0.0, 0, 0
        for start in range(0, len(order), batch_size):
            batch = [examples[i] for i in order[start: start + batch_size]]
            logits = classifier_logits(model, head, batch, mode)
            labels = np.array([e.label for e in batch])
            if binary_ce:
                onehot = np.zeros(logits.shape, dtype=model.dtype)
                onehot[np.arange(len(batch)), labels] = 1.0
                loss = ad.bce_with_logits(logits, onehot)
            else:
                loss = ad.cross_entropy_logits(logits, labels)
            backward(loss)
            adamw_step({**model.adamw_parameters(), **head}, adamw_state,
                       lr=cfg.lr_transformer, wd=cfg.wd_transformer)
            sgd_step(model.sgd_parameters(), sgd_state,
                     lr=cfg.lr_encoder, wd=cfg.wd_encoder)
            zero_grads(model.params)
            zero_grads(head)
            loss_sum += float(loss.item())
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            steps += 1
        row = {"epoch": epoch, "loss": loss_sum / steps, "acc": correct / len(examples)}
        history.append(row)
        if log:
            log(f"classify epoch {epoch}: loss {row['loss']:.4f} acc {row['acc']:.3f}")
    return head, history


def classify_accuracy(
    model: JointModel, head: dict[str, Tensor], examples: list[ClassifyExample],
    mode: str, batch_size: int = 64,
) -> float:
    correct = 0
    with ad.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = examples[start: start + batch_size]
            logits = classifier_logits(model, head, batch, mode)
            labels = np.array([e.label for e in batch])
            correct += int((logits.data.argmax(axis=1) == labels).sum())
    return correct / len(examples)


COLOR_CLASSES = tuple(sorted(ds.COLORS))


def build_color_qa(items: list[ds.CaptionedImage], dtype=np.float32) -> list[ClassifyExample]:
    """Color questions about shapes that appear exactly once in the scene."""
    examples = []
    for item in items:
        by_shape: dict[str, list] = {}
        for obj in item.scene.objects:
            by_shape.setdefault(obj.shape, []).append(obj)
        for shape, objs in by_shape.items():
            if len(objs) != 1:
                continue
            examples.append(
                ClassifyExample(
                    image=ds.image_to_float(item.pixels, dtype=dtype),
                    text=f"what color is the {shape}",
                    label=COLOR_CLASSES.index(objs[0].color),
                )
            )
    return examples


# --- codebook inspection --------------------------------------------------------

def inspect_vd(
    model: JointModel,
    items: list[ds.CaptionedImage],
    out_dir,
    index: int | None = None,
    top: int = 8,
    chunk: int = 64,
) -> dict:
    """Dump the s x s image patches assigned to codebook indices.

    Writes {out}/idx_{j}/patch_{n}.ppm tiles plus manifest.tsv rows
    (image id, row, col, index) and a montage figure.
    """
    from pathlib import Path

    if index is not None and not 0 <= index < model.cfg.k:
        raise UsageError(f"index {index} out of range [0, {model.cfg.k})")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    token_owner: list[tuple[int, int, int, int]] = []  # (image pos, row, col, idx)
    counts = np.zeros(model.cfg.k, dtype=np.int64)
    grid = None
    with ad.no_grad():
        for start in range(0, len(items), chunk):
            block = items[start: start + chunk]
            images = np.stack(
                [ds.image_to_float(it.pixels, dtype=model.dtype) for it in block]
            )
            fmap = model.encode_images(images)
            grid = (fmap.grid_h, fmap.grid_w)
            _, assignment = model.visual_inputs(fmap, use_vd=True)
            per_image = assignment.indices.reshape(len(block), fmap.l)
            counts += np.bincount(assignment.indices, minlength=model.cfg.k)
            for b, it in enumerate(block):
                for pos, j in enumerate(per_image[b]):
                    token_owner.append(
                        (start + b, pos // fmap.grid_w, pos % fmap.grid_w, int(j))
                    )

    if index is not None:
        chosen = [index]
    else:
        chosen = [int(j) for j in np.argsort(-counts, kind="stable")[:top] if counts[j] > 0]

    s = DOWNSAMPLE
    manifest = ["image_id\trow\tcol\tindex\tpatch"]
    patches_by_index: dict[int, list[np.ndarray]] = {}
    for j in chosen:
        idx_dir = out_dir / f"idx_{j}"
        idx_dir.mkdir(exist_ok=True)
        hits = [t for t in token_owner if t[3] == j]
        if not hits:
            manifest.append(f"#\t-\t-\t{j}\tno assignments")
            patches_by_index[j] = []
            continue
        tiles = []
        for n, (img_pos, row, col, _) in enumerate(hits):
            pix = items[img_pos].pixels[row * s: (row + 1) * s, col * s: (col + 1) * s]
            name = f"patch_{n}.ppm"
            ds.write_ppm(idx_dir / name, pix)
            manifest.append(f"{items[img_pos].image_id}\t{row}\t{col}\t{j}\tidx_{j}/{name}")
            tiles.append(pix)
        patches_by_index[j] = tiles
    (out_dir / "manifest.tsv").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    report.render_vd_montage(patches_by_index, out_dir)
    return {"indices": chosen, "counts": counts, "patches": patches_by_index, "grid": grid}


def patch_dominant_color(patch: np.ndarray) -> str:
    """Name of the palette (or background) color covering most pixels."""
    flat = patch.reshape(-1, 3)
    gray = (flat[:, 0] == flat[:, 1]) & (flat[:, 1] == flat[:, 2])
    counts = {"background": int((gray & (flat[:, 0] <= ds.BG_HIGH)).sum())}
    for name, rgb in ds.COLORS.items():
        counts[name] = int((flat == np.array(rgb, dtype=np.uint8)).all(axis=1).sum())
    return max(counts, key=counts.get)


def index_purity(patches: list[np.ndarray]) -> float:
    """Largest fraction of patches sharing one dominant scene color."""
    if not patches:
        return 0.0
    dominant = [patch_dominant_color(p) for p in patches]
    values, counts = np.unique(dominant, return_counts=True)
    return float(counts.max() / len(dominant))
