import numpy as np
import pytest

from vislex import data as ds
from vislex import downstream as dw
from vislex import text as tx
from vislex.config import TrainConfig
from vislex.errors import ConfigError, DataError, UsageError
from vislex.model import JointModel


def tiny_cfg(**overrides) -> TrainConfig:
    base = dict(
        c=16, n_layers=1, n_heads=2, k=16, max_len=12, epochs=3,
        decay_epochs=(2,), freeze_epochs=1, seed=5, dtype="f64", use_vd=False,
    )
    base.update(overrides)
    return TrainConfig(**base).validate()


@pytest.fixture(scope="module")
def setup():
    items = ds.generate(np.random.default_rng(2), 10)
    vocab = tx.build_vocab([c for item in items for c in item.captions])
    model = JointModel(tiny_cfg(), vocab)
    return items, vocab, model


def eval_set_from_scores(n):
    images = np.zeros((n, 3, 16, 16))
    captions = [f"cap {i}{j}" for i in range(n) for j in range(2)]
    owners = np.repeat(np.arange(n), 2)
    return dw.RetrievalEvalSet(images=images, captions=captions, caption_image=owners)


def test_recall_rank_arithmetic():
    ranks = np.array([1, 3, 6, 2])
    out = dw.recall_at_k(ranks, (1, 5, 10))
    assert out[1] == 0.25 and out[5] == 0.75 and out[10] == 1.0


def test_single_image_tr_r1_is_one(setup):
    items, vocab, model = setup
    es = eval_set_from_scores(1)
    scores = np.array([[0.3, 0.9]])
    metrics = dw.eval_retrieval(model, es, scores=scores)
    assert metrics["tr_r@1"] == 1.0
    assert metrics["ir_r@1"] == 1.0


def test_recall_monotone_and_saturates(setup):
    items, vocab, model = setup
    es = eval_set_from_scores(6)
    rng = np.random.default_rng(0)
    scores = rng.standard_normal((6, 12))
    metrics = dw.eval_retrieval(model, es, ks=(1, 2, 5, 12), scores=scores)
    assert metrics["tr_r@1"] <= metrics["tr_r@2"] <= metrics["tr_r@5"] <= metrics["tr_r@12"]
    assert metrics["tr_r@12"] == 1.0  # K >= candidate count
    assert metrics["ir_r@12"] <= 1.0 and metrics["ir_r@5"] <= metrics["ir_r@12"]


def test_random_scores_match_chance_baseline(setup):
    items, vocab, model = setup
    n, trials = 50, 200
    es = eval_set_from_scores(n)
    hits = 0
    for trial in range(trials):
        rng = np.random.default_rng(trial)
        scores = rng.standard_normal((n, 2 * n))
        hits += dw.eval_retrieval(model, es, ks=(1,), scores=scores)["tr_r@1"] * n
    p_hat = hits / (trials * n)
    p = 1.0 / n  # 2 ground-truth captions among 2n candidates
    sigma = np.sqrt(p * (1 - p) / (trials * n))
    assert abs(p_hat - p) < 3 * sigma


def test_tie_break_stable_by_id(setup):
    items, vocab, model = setup
    es = eval_set_from_scores(2)
    scores = np.zeros((2, 4))  # all tied: stable order ranks caption 0 first
    metrics = dw.eval_retrieval(model, es, ks=(1,), scores=scores)
    assert metrics["tr_r@1"] == 0.5  # image 0 wins, image 1 loses to caption 0


def test_identity_label_matrix():
    rows = np.repeat(np.arange(3), 3)
    cols = np.tile(np.arange(3), 3)
    labels = (rows == cols).astype(float).reshape(3, 3)
    np.testing.assert_array_equal(labels, np.eye(3))


def test_use_vd_flag_flips_exactly_one_path(setup):
    items, vocab, model = setup
    images = np.stack([ds.image_to_float(it.pixels) for it in items[:2]])
    fmap = model.encode_images(images)
    quantized, assignment = model.visual_inputs(fmap, use_vd=True)
    raw, assignment2 = model.visual_inputs(fmap, use_vd=False)
    np.testing.assert_array_equal(assignment.indices, assignment2.indices)
    np.testing.assert_array_equal(raw.data, fmap.features.data)
    np.testing.assert_array_equal(
        quantized.data.reshape(-1, model.cfg.c),
        model.codebook.entries.data[assignment.indices],
    )
    # identical position encodings downstream of the flag
    pe = model.visual_pe(fmap.grid_h, fmap.grid_w)
    seg = model.params["embed.segment"].data[0]
    a = model.visual_tokens(quantized, fmap.grid_h, fmap.grid_w)
    b = model.visual_tokens(raw, fmap.grid_h, fmap.grid_w)
    np.testing.assert_array_equal(a.data, quantized.data + pe + seg)
    np.testing.assert_array_equal(b.data, raw.data + pe + seg)


def test_scoring_matrix_symmetry_tr_ir(setup):
    # TR and IR read the same pair scores: transposing the matrix swaps roles
    items, vocab, model = setup
    es = eval_set_from_scores(4)
    rng = np.random.default_rng(3)
    scores = rng.standard_normal((4, 8))
    tr = dw.eval_retrieval(model, es, ks=(1,), scores=scores)
    assert 0.0 <= tr["tr_r@1"] <= 1.0 and 0.0 <= tr["ir_r@1"] <= 1.0


def test_classifier_head_shapes(setup):
    items, vocab, model = setup
    single = dw.init_classifier_head(model.cfg.c, 5, "single", seed=0)
    paired = dw.init_classifier_head(model.cfg.c, 5, "paired", seed=0)
    assert single["cls.fc1.w"].shape == (model.cfg.c, model.cfg.c)
    assert paired["cls.fc1.w"].shape == (2 * model.cfg.c, model.cfg.c)
    with pytest.raises(ConfigError):
        dw.init_classifier_head(model.cfg.c, 5, "both", seed=0)


def test_untrained_classifier_loss_near_log_n(setup):
    items, vocab, model = setup
    from vislex import autodiff as ad

    examples = dw.build_color_qa(items[:6])
    head = dw.init_classifier_head(model.cfg.c, 5, "single", seed=0, dtype=model.dtype)
    logits = dw.classifier_logits(model, head, examples[:4], "single")
    labels = np.array([e.label for e in examples[:4]])
    loss = ad.cross_entropy_logits(logits, labels)
    np.testing.assert_allclose(loss.item(), np.log(5.0), atol=1e-9)  # zeroed fc2


def test_paired_mode_concatenates_two_cls(setup):
    items, vocab, model = setup
    base = dw.build_color_qa(items[:4])[:2]
    paired = [
        dw.ClassifyExample(image=e.image, text=e.text, label=e.label, image2=e.image)
        for e in base
    ]
    head = dw.init_classifier_head(model.cfg.c, 3, "paired", seed=0, dtype=model.dtype)
    logits = dw.classifier_logits(model, head, paired, "paired")
    assert logits.shape == (2, 3)
    with pytest.raises(DataError):
        dw.classifier_logits(model, head, base, "paired")


def test_label_out_of_range_rejected(setup):
    items, vocab, model = setup
    examples = dw.build_color_qa(items[:4])[:2]
    examples[0].label = 9
    with pytest.raises(DataError):
        dw.finetune_classify(model, examples, "single", 5, tiny_cfg(), epochs=1)


def test_color_qa_labels_match_scene():
    items = ds.generate(np.random.default_rng(4), 40)
    for example in dw.build_color_qa(items[:20]):
        shape = example.text.rsplit(" ", 1)[1]
        assert example.text.startswith("what color is the")
        assert 0 <= example.label < len(dw.COLOR_CLASSES)


def test_ft_mini_batch_too_large(setup):
    items, vocab, model = setup
    cfg = tiny_cfg(ft_batch_pairs=100, ft_max_pairs=10)
    with pytest.raises(ConfigError, match="exceeds"):
        dw.finetune_retrieval(model, items, cfg)


def test_inspect_vd_dump_layout(setup, tmp_path):
    items, vocab, model = setup
    out = dw.inspect_vd(model, items, tmp_path / "vd", top=4)
    manifest = (tmp_path / "vd" / "manifest.tsv").read_text().splitlines()
    assert manifest[0] == "image_id\trow\tcol\tindex\tpatch"
    assert len(manifest) > 1
    for j in out["indices"]:
        tiles = list((tmp_path / "vd" / f"idx_{j}").glob("patch_*.ppm"))
        assert tiles
        patch = ds.read_ppm(tiles[0])
        assert patch.shape == (16, 16, 3)  # s x s pixels
    assert (tmp_path / "vd" / "figures" / "index_patches.png").exists()


def test_inspect_vd_unused_index_notes_manifest(setup, tmp_path):
    items, vocab, model = setup
    counts = dw.inspect_vd(model, items, tmp_path / "probe", top=999)["counts"]
    unused = int(np.flatnonzero(counts == 0)[0]) if (counts == 0).any() else None
    if unused is None:
        pytest.skip("every index in use for this toy setup")
    out_dir = tmp_path / "vd_empty"
    dw.inspect_vd(model, items, out_dir, index=unused)
    manifest = (out_dir / "manifest.tsv").read_text()
    assert "no assignments" in manifest
    assert (out_dir / f"idx_{unused}").is_dir()


def test_inspect_vd_index_out_of_range(setup, tmp_path):
    items, vocab, model = setup
    with pytest.raises(UsageError):
        dw.inspect_vd(model, items, tmp_path / "x", index=model.cfg.k)


def test_patch_dominant_color():
    patch = np.full((16, 16, 3), ds.BACKGROUND, dtype=np.uint8)
    assert dw.patch_dominant_color(patch) == "background"
    patch[2:14, 2:14] = ds.COLORS["red"]
    assert dw.patch_dominant_color(patch) == "red"
    assert dw.index_purity([patch, patch]) == 1.0
