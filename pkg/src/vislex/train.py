"""Pre-training loop, run-state checkpointing, and the stage-timing bench.

Every source of randomness in an epoch comes from one generator seeded by
(run seed, epoch), so a run resumed from any epoch checkpoint replays the
remaining epochs bitwise. The codebook momentum update runs after backward,
keeping each step's losses consistent with the assignment they used.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as ds
from . import dictionary as vd
from . import report
from . import text as tx
from .autodiff import backward
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .config import TrainConfig, parse_config
from .encoder import joint_sequence_length, token_grid
from .errors import DataError, NumericAbort, SamplingError
from .model import JointModel
from .optim import AdamWState, SgdState, adamw_step, sgd_step, zero_grads
from .pretrain import build_pretrain_batch, pretrain_loss

CSV_HEADER = "epoch,total,mlm,mvm,itm,itm_acc,util,perplexity"


@dataclass
class RunState:
    model: JointModel
    sgd: SgdState
    adamw: AdamWState
    next_epoch: int = 0


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


# --- checkpoint glue ------------------------------------------------------------

def state_to_bundle(state: RunState, cfg: TrainConfig) -> CheckpointBundle:
    tensors: dict[str, np.ndarray] = {
        name: p.data for name, p in state.model.named_parameters().items()
    }
    tensors["codebook.entries"] = state.model.codebook.entries.data
    tensors["codebook.counts"] = state.model.codebook.counts
    for name, v in state.sgd.velocity.items():
        tensors[f"opt.sgd.v.{name}"] = v
    for name, m in state.adamw.m.items():
        tensors[f"opt.adamw.m.{name}"] = m
    for name, v in state.adamw.v.items():
        tensors[f"opt.adamw.v.{name}"] = v
    meta = {
        "next_epoch": state.next_epoch,
        "adamw_t": state.adamw.t,
        "vocab": state.model.vocab.tokens,
        "rng": {"scheme": "per-epoch seed sequence", "seed": cfg.seed},
    }
    return CheckpointBundle(tensors=tensors, meta=meta, config_text=cfg.to_text())


def bundle_to_state(bundle: CheckpointBundle) -> tuple[RunState, TrainConfig]:
    cfg = parse_config(bundle.config_text)
    vocab_tokens = bundle.meta["vocab"]
    vocab = tx.Vocabulary(tokens=list(vocab_tokens),
                          ids={t: i for i, t in enumerate(vocab_tokens)})
    model = JointModel(cfg, vocab)
    for name, p in model.named_parameters().items():
        p.data = bundle.tensors[name].copy()
    model.codebook.entries.data = bundle.tensors["codebook.entries"].copy()
    model.codebook.counts = bundle.tensors["codebook.counts"].copy()
    model.codebook.invalidate_cache()
    sgd = SgdState()
    adamw = AdamWState(t=int(bundle.meta["adamw_t"]))
    for name, arr in bundle.tensors.items():
        if name.startswith("opt.sgd.v."):
            sgd.velocity[name[len("opt.sgd.v."):]] = arr.copy()
        elif name.startswith("opt.adamw.m."):
            adamw.m[name[len("opt.adamw.m."):]] = arr.copy()
        elif name.startswith("opt.adamw.v."):
            adamw.v[name[len("opt.adamw.v."):]] = arr.copy()
    state = RunState(model=model, sgd=sgd, adamw=adamw,
                     next_epoch=int(bundle.meta["next_epoch"]))
    return state, cfg


# --- negative sampling ------------------------------------------------------------

def sample_negative_captions(
    rng: np.random.Generator,
    pool: list[tuple[int, str]],
    image_index: int,
    positives: tuple[str, str],
    count: int = 2,
    max_draws: int = 1000,
) -> list[str]:
    """Uniform draws from other images' captions, rejecting exact duplicates."""
    out: list[str] = []
    for _ in range(max_draws):
        owner, caption = pool[int(rng.integers(len(pool)))]
        if owner == image_index or caption in positives:
            continue
        out.append(caption)
        if len(out) == count:
            return out
    raise SamplingError(
        f"could not sample {count} negatives for image {image_index} "
        f"after {max_draws} draws"
    )


# --- training loop ------------------------------------------------------------

def lr_scale(cfg: TrainConfig, epoch: int) -> float:
    return 0.1 ** sum(1 for d in cfg.decay_epochs if epoch >= d)


def train_one_epoch(state: RunState, items: list[ds.CaptionedImage], cfg: TrainConfig,
                    epoch: int) -> dict:
    model = state.model
    rng = epoch_rng(cfg.seed, epoch)
    frozen = epoch < cfg.freeze_epochs
    scale = lr_scale(cfg, epoch)
    pool = [(i, cap) for i, item in enumerate(items) for cap in item.captions]

    order = rng.permutation(len(items))
    hist = np.zeros(cfg.k, dtype=np.int64)
    sums = {"total": 0.0, "mlm": 0.0, "mvm": 0.0, "itm": 0.0}
    n_steps = 0
    itm_correct = 0
    itm_total = 0

    for start in range(0, len(order), cfg.batch_images):
        chunk = order[start: start + cfg.batch_images]
        images = np.stack(
            [ds.image_to_float(items[i].pixels, dtype=model.dtype) for i in chunk]
        )
        pos = [items[i].captions for i in chunk]
        neg = [
            sample_negative_captions(rng, pool, int(i), items[i].captions)
            for i in chunk
        ]
        batch_id = f"epoch{epoch}:step{n_steps}"
        batch = build_pretrain_batch(
            images, pos, neg, model, rng, frozen=frozen, batch_id=batch_id
        )
        losses = pretrain_loss(batch, model)
        values = losses.as_floats()
        if not all(np.isfinite(v) for v in values):
            raise NumericAbort(
                f"non-finite loss {values} in batch {batch_id}", batch_id=batch_id
            )
        backward(losses.total)
        if not frozen:
            sgd_step(model.sgd_parameters(), state.sgd,
                     lr=cfg.lr_encoder * scale, wd=cfg.wd_encoder)
        adamw_step(model.adamw_parameters(), state.adamw,
                   lr=cfg.lr_transformer * scale, wd=cfg.wd_transformer)
        vd.momentum_update(model.codebook, batch.fmap.features.data, batch.assignment)
        zero_grads(model.params)

        hist += np.bincount(batch.assignment.indices, minlength=cfg.k)
        for key, value in zip(sums, values):
            sums[key] += value
        itm_correct += int(((losses.itm_logits > 0) == (losses.itm_labels == 1)).sum())
        itm_total += losses.itm_labels.size
        n_steps += 1

    usage = vd.utilization(hist)
    return {
        "epoch": epoch,
        "total": sums["total"] / n_steps,
        "mlm": sums["mlm"] / n_steps,
        "mvm": sums["mvm"] / n_steps,
        "itm": sums["itm"] / n_steps,
        "itm_acc": itm_correct / itm_total,
        "util": usage.fraction_used,
        "perplexity": usage.perplexity,
    }


def run_pretrain(cfg: TrainConfig, resume_from: Path | None = None,
                 log=None) -> Path:
    """Train per the config; returns the run directory.

    The run directory collects vocab.txt, metrics.csv, per-epoch checkpoints
    and rendered figures. With resume_from, model/optimizer state and the
    architecture config come from the checkpoint; only the paths are taken
    from cfg.
    """
    out_dir = Path(cfg.out_dir or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    data_dir = Path(cfg.data_dir) / "train"
    if not data_dir.exists():
        raise DataError(f"training split not found at {data_dir}")
    items = ds.load_dataset(data_dir)

    if resume_from is not None:
        state, ckpt_cfg = bundle_to_state(load_checkpoint(resume_from))
        cfg = parse_config(
            f"data_dir = {cfg.data_dir}\nout_dir = {cfg.out_dir}", base=ckpt_cfg
        )
    else:
        vocab = tx.build_vocab([cap for item in items for cap in item.captions])
        model = JointModel(cfg, vocab)
        state = RunState(model=model, sgd=SgdState(), adamw=AdamWState())

    (out_dir / "vocab.txt").write_text(
        "\n".join(state.model.vocab.tokens) + "\n", encoding="utf-8"
    )
    csv_path = out_dir / "metrics.csv"
    csv_path.write_text(CSV_HEADER + "\n", encoding="utf-8")

    try:
        for epoch in range(state.next_epoch, cfg.epochs):
            row = train_one_epoch(state, items, cfg, epoch)
            line = ",".join(
                [str(row["epoch"])]
                + [_fmt(row[k]) for k in ("total", "mlm", "mvm", "itm",
                                          "itm_acc", "util", "perplexity")]
            )
            with open(csv_path, "a", encoding="utf-8") as f:
                f.write(line + "\n")
            if log:
                log(line)
            state.next_epoch = epoch + 1
            save_checkpoint(out_dir / f"ckpt_epoch_{epoch:03d}.bin",
                            state_to_bundle(state, cfg))
            save_checkpoint(out_dir / "latest.bin", state_to_bundle(state, cfg))
    except NumericAbort as abort:
        (out_dir / "abort.txt").write_text(
            f"batch {abort.batch_id}: {abort}\n", encoding="utf-8"
        )
        raise

    report.render_training_figures(out_dir)
    return out_dir


# --- stage-timing bench ------------------------------------------------------------

def run_bench(cfg: TrainConfig, ckpt_path: Path, out_dir: Path) -> dict:
    """Mean per-stage latency plus the sequence-length arithmetic."""
    state, ckpt_cfg = bundle_to_state(load_checkpoint(ckpt_path))
    model = state.model
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    image = rng.random((1, 3, cfg.bench_height, cfg.bench_width)).astype(model.dtype)
    ids = np.zeros((1, ckpt_cfg.max_len), dtype=np.int64)
    ids[0, 0] = tx.CLS
    ids[0, 1] = tx.SEP
    mask = (ids != tx.PAD).astype(np.int64)
    mask[0, 0] = 1

    stages = {"encode": [], "vd_assign_embed": [], "transformer_forward": []}
    with ad.no_grad():
        for run in range(cfg.bench_runs + 2):
            t0 = time.perf_counter()
            fmap = model.encode_images(image)
            t1 = time.perf_counter()
            tokens, assignment = model.visual_inputs(fmap, use_vd=True)
            t2 = time.perf_counter()
            visual_in = model.visual_tokens(tokens, fmap.grid_h, fmap.grid_w)
            joint = model.joint(visual_in, ids, mask)
            model.forward(joint)
            t3 = time.perf_counter()
            if run >= 2:  # discard warmup
                stages["encode"].append((t1 - t0) * 1e3)
                stages["vd_assign_embed"].append((t2 - t1) * 1e3)
                stages["transformer_forward"].append((t3 - t2) * 1e3)

    stage_ms = {name: float(np.mean(vals)) for name, vals in stages.items()}
    gh, gw = token_grid(cfg.bench_height, cfg.bench_width, cfg.s)
    result = {
        "stage_ms": stage_ms,
        "n_stages": len(stage_ms),
        "visual_tokens": gh * gw,
        "text_tokens": ckpt_cfg.max_len,
        "joint_length": joint_sequence_length(
            cfg.bench_height, cfg.bench_width, cfg.s, ckpt_cfg.max_len
        ),
    }

    lines = ["metric\tvalue"]
    for name, ms in stage_ms.items():
        lines.append(f"stage_ms.{name}\t{ms:.3f}")
    for key in ("n_stages", "visual_tokens", "text_tokens", "joint_length"):
        lines.append(f"{key}\t{result[key]}")
    (out_dir / "bench.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    report.render_bench_figure(stage_ms, out_dir)
    return result
