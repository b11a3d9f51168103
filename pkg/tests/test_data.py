import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rkblocks.data import (
    BOS,
    EOS,
    PAD,
    SEP,
    UNK,
    Corpus,
    Split,
    batch_stream,
    char_corpus,
    gen_copy_task,
    iter_batches,
    load_text,
    synthetic_text,
)
from rkblocks.errors import ContractError, DataError


def test_copy_task_structure():
    c = gen_copy_task(vocab=4 + 1, length=1, n=10, seed=0)
    seq = c.train.sequences[0]
    assert len(seq) == 5
    assert seq[0] == BOS and seq[2] == SEP and seq[-1] == EOS and seq[1] == seq[3]


def test_copy_task_smallest_vocab():
    # four reserved ids leave no symbol to copy, so the task needs at least five
    with pytest.raises(ContractError):
        gen_copy_task(vocab=4, length=1, n=5, seed=0)


@settings(max_examples=25, derandomize=True, deadline=None)
@given(vocab=st.integers(5, 30), length=st.integers(1, 12), n=st.integers(2, 50), seed=st.integers(0, 1000))
def test_copy_task_properties(vocab, length, n, seed):
    c = gen_copy_task(vocab, length, n, seed)
    assert len(c.train) + len(c.valid) == n
    for split in (c.train, c.valid):
        for s, lf in zip(split.sequences, split.loss_from):
            assert len(s) == 2 * length + 3
            assert np.array_equal(s[1:length + 1], s[length + 2:2 * length + 2])
            assert s.min() >= 0 and s.max() < vocab
            assert lf == length + 1
    again = gen_copy_task(vocab, length, n, seed)
    assert all(np.array_equal(a, b) for a, b in zip(c.train.sequences, again.train.sequences))


def test_copy_task_loss_mask_starts_after_separator():
    c = gen_copy_task(vocab=8, length=3, n=4, seed=1, valid_fraction=0.25)
    batch = next(iter_batches(c.train, 1000))
    # inputs are seq[:-1]; targets seq[1:]; only the copy and eos are scored
    for r in range(batch.inputs.shape[0]):
        scored = batch.targets[r][batch.mask[r] > 0]
        seq = c.train.sequences[r]
        assert np.array_equal(scored, seq[5:])
        assert batch.inputs[r][batch.mask[r] > 0][0] == SEP


def test_char_corpus():
    lines = ["abc", "", "abd", "xyz", "aaa"]
    c = char_corpus(lines, seed=0, valid_fraction=0.25)
    assert len(c.train) + len(c.valid) == 4
    assert c.itos[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    for s in c.train.sequences:
        assert s[0] == BOS and s[-1] == EOS
        assert UNK not in s[1:-1]
    for split in (c.train, c.valid):
        assert all(lf == 0 for lf in split.loss_from)
    again = char_corpus(lines, seed=0, valid_fraction=0.25)
    assert [s.tolist() for s in again.valid.sequences] == [s.tolist() for s in c.valid.sequences]


def test_char_corpus_unknown_and_truncation():
    lines = ["ab" * 50, "ab", "ab", "zz"]
    # first seed whose split holds the "zz" line out of training
    seed = next(s for s in range(100) if "z" not in char_corpus(lines, seed=s, valid_fraction=0.25).itos)
    c = char_corpus(lines, seed=seed, valid_fraction=0.25, max_len=10)
    assert c.max_len <= 10
    assert c.valid.sequences[0].tolist() == [BOS, UNK, UNK, EOS]


def test_char_corpus_needs_lines():
    with pytest.raises(DataError):
        char_corpus(["only one"], seed=0)


def test_corpus_rejects_out_of_range_ids():
    bad = Split([np.array([1, 9, 2])], [0])
    with pytest.raises(DataError):
        Corpus(bad, Split(), vocab_size=5)


def test_synthetic_text_is_deterministic_and_textlike():
    a = synthetic_text(200, seed=4)
    assert a == synthetic_text(200, seed=4)
    assert a != synthetic_text(200, seed=5)
    assert all(line.endswith(".") and line[0].isupper() for line in a)


def test_load_text(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("first line\nsecond\n", encoding="utf-8")
    assert load_text(path) == ["first line", "second"]


@settings(max_examples=25, derandomize=True, deadline=None)
@given(budget=st.integers(30, 400), seed=st.integers(0, 100))
def test_batches_respect_token_budget_and_cover_split(budget, seed):
    lines = synthetic_text(60, seed=seed)
    c = char_corpus(lines, seed=seed, max_len=40)
    seen = 0
    for batch in iter_batches(c.train, budget):
        rows, width = batch.inputs.shape
        assert rows == 1 or rows * width <= budget
        assert np.all(batch.targets[batch.mask > 0] != PAD)
        seen += rows
    assert seen == len(c.train)
    assert sum(b.n_tokens for b in iter_batches(c.train, budget)) == c.train.n_target_tokens


def test_batch_stream_deterministic():
    c = gen_copy_task(10, 4, 100, seed=0)
    s1 = batch_stream(c.train, 64, np.random.default_rng(7))
    s2 = batch_stream(c.train, 64, np.random.default_rng(7))
    for _ in range(20):
        b1, b2 = next(s1), next(s2)
        assert np.array_equal(b1.inputs, b2.inputs)


def test_batch_stream_empty_split():
    with pytest.raises(DataError):
        next(batch_stream(Split(), 64, np.random.default_rng(0)))
