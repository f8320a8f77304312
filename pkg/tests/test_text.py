import numpy as np
import pytest

from vislex import text as tx
from vislex.errors import ConfigError


def test_build_vocab_sorted_assignment():
    vocab = tx.build_vocab(["a red circle"])
    assert vocab.id_of("a") == 5
    assert vocab.id_of("circle") == 6
    assert vocab.id_of("red") == 7
    assert len(vocab) == 8


def test_reserved_ids_fixed():
    vocab = tx.build_vocab(["z y x"])
    assert vocab.tokens[:5] == ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"]
    assert (tx.PAD, tx.CLS, tx.SEP, tx.MASK, tx.UNK) == (0, 1, 2, 3, 4)


def test_unseen_word_maps_to_unk():
    vocab = tx.build_vocab(["a red circle"])
    seq = tx.tokenize("a purple circle", vocab, max_len=8)
    assert tx.UNK in seq.ids.tolist()


def test_empty_corpus_rejected():
    with pytest.raises(ConfigError):
        tx.build_vocab([])


def test_tokenize_empty_string():
    vocab = tx.build_vocab(["a red circle"])
    seq = tx.tokenize("", vocab, max_len=5)
    assert seq.ids.tolist() == [tx.CLS, tx.SEP, tx.PAD, tx.PAD, tx.PAD]
    assert seq.mask.tolist() == [1, 1, 0, 0, 0]


def test_tokenize_direct_mapping():
    vocab = tx.build_vocab(["a red circle"])
    seq = tx.tokenize("a red circle", vocab, max_len=6)
    assert seq.ids.tolist() == [tx.CLS, 5, 7, 6, tx.SEP, tx.PAD]


def test_tokenize_truncates_and_keeps_sep():
    vocab = tx.build_vocab(["a b c d e f g"])
    seq = tx.tokenize("a b c d e f g", vocab, max_len=5)
    assert seq.ids[0] == tx.CLS
    assert (seq.ids == tx.SEP).sum() == 1
    assert seq.ids[4] == tx.SEP  # [CLS] + 3 words + [SEP]


def test_tokenize_min_length_guard():
    vocab = tx.build_vocab(["a"])
    with pytest.raises(ConfigError):
        tx.tokenize("a", vocab, max_len=2)


def test_round_trip():
    vocab = tx.build_vocab(["a red circle left of a blue square"])
    original = "A red Circle, left of a BLUE square"
    seq = tx.tokenize(original, vocab, max_len=16)
    assert tx.detokenize(seq, vocab) == "a red circle left of a blue square"


def test_padding_only_after_sep():
    vocab = tx.build_vocab(["a red circle"])
    seq = tx.tokenize("a red", vocab, max_len=8)
    sep_pos = int(np.flatnonzero(seq.ids == tx.SEP)[0])
    assert np.all(seq.ids[sep_pos + 1:] == tx.PAD)
    assert np.all(seq.ids[:sep_pos] != tx.PAD)


def test_mlm_mask_p_zero_unchanged():
    vocab = tx.build_vocab(["a red circle"])
    seq = tx.tokenize("a red circle", vocab, max_len=8)
    masked, labels = tx.mlm_mask(seq, 0.0, np.random.default_rng(0), len(vocab))
    assert labels == {}
    np.testing.assert_array_equal(masked.ids, seq.ids)


class ForcedRng:
    """Always selects, always takes the first branch."""

    def random(self):
        return 0.0

    def integers(self, lo, hi):
        return lo


def test_mlm_mask_p_one_forced_mask_branch():
    vocab = tx.build_vocab(["a red circle"])
    seq = tx.tokenize("a red circle", vocab, max_len=8)
    masked, labels = tx.mlm_mask(seq, 1.0, ForcedRng(), len(vocab))
    word_positions = [1, 2, 3]
    assert sorted(labels) == word_positions
    assert all(masked.ids[i] == tx.MASK for i in word_positions)
    assert masked.ids[0] == tx.CLS and masked.ids[4] == tx.SEP


def test_mlm_never_touches_special_tokens():
    vocab = tx.build_vocab(["a red circle above a blue square"])
    seq = tx.tokenize("a red circle above a blue square", vocab, max_len=12)
    rng = np.random.default_rng(1)
    for _ in range(50):
        masked, labels = tx.mlm_mask(seq, 0.9, rng, len(vocab))
        assert masked.ids[0] == tx.CLS
        assert (masked.ids == tx.SEP).sum() == 1
        sep_pos = int(np.flatnonzero(seq.ids == tx.SEP)[0])
        assert np.all(masked.ids[sep_pos:] == seq.ids[sep_pos:])
        for pos in labels:
            assert labels[pos] == seq.ids[pos]


def test_mlm_same_seed_same_decisions():
    vocab = tx.build_vocab(["a red circle above a blue square"])
    seq = tx.tokenize("a red circle above a blue square", vocab, max_len=12)
    a = tx.mlm_mask(seq, 0.3, np.random.default_rng(7), len(vocab))
    b = tx.mlm_mask(seq, 0.3, np.random.default_rng(7), len(vocab))
    np.testing.assert_array_equal(a[0].ids, b[0].ids)
    assert a[1] == b[1]


def test_mlm_monte_carlo_statistics():
    vocab = tx.build_vocab(["w" + str(i) for i in range(40)])
    caption = " ".join("w" + str(i) for i in range(10))
    seq = tx.tokenize(caption, vocab, max_len=12)
    rng = np.random.default_rng(123)

    n_candidates = 0
    n_selected = 0
    n_masked = n_random = n_kept = 0
    while n_candidates < 100_000:
        masked, labels = tx.mlm_mask(seq, 0.15, rng, len(vocab))
        n_candidates += 10
        n_selected += len(labels)
        for pos, original in labels.items():
            if masked.ids[pos] == tx.MASK:
                n_masked += 1
            elif masked.ids[pos] == original:
                n_kept += 1
            else:
                n_random += 1

    assert abs(n_selected / n_candidates - 0.15) < 0.01
    assert abs(n_masked / n_selected - 0.8) < 0.02
    assert abs(n_random / n_selected - 0.1) < 0.02
    assert abs(n_kept / n_selected - 0.1) < 0.02
