import numpy as np
import pytest

import vislex.train as tr
from vislex import data as ds
from vislex.checkpoint import load_checkpoint
from vislex.config import TrainConfig
from vislex.errors import NumericAbort, SamplingError
from vislex.model import JointModel
from vislex.text import build_vocab


def tiny_cfg(data_dir, out_dir, **overrides) -> TrainConfig:
    base = dict(
        c=16, n_layers=1, n_heads=2, k=16, max_len=12, batch_images=4,
        epochs=3, decay_epochs=(2,), freeze_epochs=1, seed=11, dtype="f32",
        data_dir=str(data_dir), out_dir=str(out_dir),
    )
    base.update(overrides)
    return TrainConfig(**base).validate()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    items = ds.generate(np.random.default_rng(0), 24)
    ds.save_dataset(items, root / "train")
    return root


def read_rows(run_dir):
    lines = (run_dir / "metrics.csv").read_text().splitlines()
    assert lines[0] == tr.CSV_HEADER
    return {line.split(",")[0]: line for line in lines[1:]}


def test_run_writes_outputs_and_is_deterministic(data_dir, tmp_path):
    cfg_a = tiny_cfg(data_dir, tmp_path / "a")
    cfg_b = tiny_cfg(data_dir, tmp_path / "b")
    run_a = tr.run_pretrain(cfg_a)
    run_b = tr.run_pretrain(cfg_b)

    csv_a = (run_a / "metrics.csv").read_bytes()
    csv_b = (run_b / "metrics.csv").read_bytes()
    assert csv_a == csv_b  # bitwise-identical logs for identical config+seed

    assert (run_a / "vocab.txt").exists()
    assert (run_a / "latest.bin").exists()
    assert (run_a / "figures" / "loss_curves.png").exists()
    assert (run_a / "figures" / "codebook_health.png").exists()
    assert len(read_rows(run_a)) == 3


def test_resume_replays_next_epoch_bitwise(data_dir, tmp_path):
    cfg = tiny_cfg(data_dir, tmp_path / "full")
    full = tr.run_pretrain(cfg)
    full_rows = read_rows(full)

    resumed_cfg = tiny_cfg(data_dir, tmp_path / "resumed")
    resumed = tr.run_pretrain(resumed_cfg, resume_from=full / "ckpt_epoch_001.bin")
    resumed_rows = read_rows(resumed)

    assert set(resumed_rows) == {"2"}  # continues at epoch 2 only
    assert resumed_rows["2"] == full_rows["2"]  # bitwise-identical loss row


def test_conv_blocks_bitwise_frozen_through_freeze_epochs(data_dir, tmp_path):
    cfg = tiny_cfg(data_dir, tmp_path / "fr", epochs=3, freeze_epochs=2)
    run_dir = tr.run_pretrain(cfg)

    items = ds.load_dataset(data_dir / "train")
    vocab = build_vocab([c for item in items for c in item.captions])
    reference = JointModel(cfg, vocab)

    after_freeze = load_checkpoint(run_dir / "ckpt_epoch_001.bin")
    for name in ("encoder.conv1.w", "encoder.conv2.w", "encoder.conv3.w",
                 "encoder.conv1.b", "encoder.conv2.b", "encoder.conv3.b"):
        np.testing.assert_array_equal(
            after_freeze.tensors[name], reference.params[name].data
        )
    # projection trained even while frozen
    assert not np.array_equal(
        after_freeze.tensors["encoder.proj.w"], reference.params["encoder.proj.w"].data
    )
    # after the freeze window the blocks move
    final = load_checkpoint(run_dir / "ckpt_epoch_002.bin")
    assert not np.array_equal(
        final.tensors["encoder.conv1.w"], reference.params["encoder.conv1.w"].data
    )


def test_lr_scale_monotone():
    cfg = TrainConfig(epochs=30, decay_epochs=(20, 26))
    scales = [tr.lr_scale(cfg, e) for e in range(30)]
    assert scales[0] == 1.0
    assert scales[20] == pytest.approx(0.1)
    assert scales[26] == pytest.approx(0.01)
    assert all(a >= b for a, b in zip(scales, scales[1:]))


def test_numeric_abort_dumps_batch_id(data_dir, tmp_path, monkeypatch):
    cfg = tiny_cfg(data_dir, tmp_path / "nan")
    original = tr.pretrain_loss

    def poisoned(batch, model):
        losses = original(batch, model)
        losses.mlm = float("nan")
        return losses

    monkeypatch.setattr(tr, "pretrain_loss", poisoned)
    with pytest.raises(NumericAbort) as err:
        tr.run_pretrain(cfg)
    assert "epoch0:step0" in str(err.value)
    assert (tmp_path / "nan" / "abort.txt").exists()


def test_negative_sampling_rejects_duplicates():
    pool = [(0, "a red circle"), (1, "a blue square"), (1, "a red circle")]
    rng = np.random.default_rng(0)
    negs = tr.sample_negative_captions(rng, pool, image_index=0,
                                       positives=("a red circle", "x"))
    assert negs == ["a blue square", "a blue square"]


def test_negative_sampling_gives_up():
    pool = [(0, "a red circle")]
    with pytest.raises(SamplingError):
        tr.sample_negative_captions(
            np.random.default_rng(0), pool, 0, ("a red circle", "y"), max_draws=10
        )


def test_bench_reports_three_stages_and_arithmetic(data_dir, tmp_path):
    cfg = tiny_cfg(data_dir, tmp_path / "bench_run", epochs=1, freeze_epochs=0,
                   decay_epochs=())
    run_dir = tr.run_pretrain(cfg)
    bench_cfg = tiny_cfg(data_dir, tmp_path / "bench_out", bench_runs=2)
    result = tr.run_bench(bench_cfg, run_dir / "latest.bin", tmp_path / "bench_out")
    assert result["n_stages"] == 3
    assert result["joint_length"] == 16 + 12  # 64x64 at s=16 plus max_len text
    assert (tmp_path / "bench_out" / "bench.tsv").exists()
    assert (tmp_path / "bench_out" / "figures" / "stage_latency.png").exists()


def test_bench_paper_scale_arithmetic(data_dir, tmp_path):
    cfg = tiny_cfg(data_dir, tmp_path / "b2_run", epochs=1, freeze_epochs=0,
                   decay_epochs=(), max_len=16)
    run_dir = tr.run_pretrain(cfg)
    bench_cfg = tiny_cfg(
        data_dir, tmp_path / "b2_out", max_len=16,
        s=64, bench_height=600, bench_width=1000, bench_runs=1,
    )
    result = tr.run_bench(bench_cfg, run_dir / "latest.bin", tmp_path / "b2_out")
    assert result["visual_tokens"] == 160
    assert result["joint_length"] == 176
