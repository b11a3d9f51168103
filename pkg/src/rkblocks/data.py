"""Corpora and token-count batching: the synthetic copy task and char-level text."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, DataError

PAD, BOS, EOS, SEP = 0, 1, 2, 3
UNK = 3  # char corpora have no separator and reuse the slot for unknown characters
N_RESERVED = 4


@dataclass
class Split:
    sequences: list = field(default_factory=list)
    # Loss is taken on target positions i >= loss_from[j] of sequence j.
    loss_from: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def n_target_tokens(self) -> int:
        return int(sum(len(s) - 1 - lf for s, lf in zip(self.sequences, self.loss_from)))


@dataclass
class Corpus:
    train: Split
    valid: Split
    vocab_size: int
    itos: Optional[list] = None

    def __post_init__(self):
        for split in (self.train, self.valid):
            for s in split.sequences:
                if len(s) and (s.min() < 0 or s.max() >= self.vocab_size):
                    raise DataError(f"token id outside [0, {self.vocab_size})")

    @property
    def max_len(self) -> int:
        return max((len(s) for s in self.train.sequences + self.valid.sequences), default=0)


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


# -- copy task -------------------------------------------------------------

def gen_copy_task(vocab: int, length: int, n: int, seed: int,
                  valid_fraction: float = 0.1) -> Corpus:
    """``bos x_1..x_k sep x_1..x_k eos`` with loss only after the separator."""
    if vocab < N_RESERVED + 1:
        raise ContractError(f"copy task needs vocab >= {N_RESERVED + 1} (4 reserved ids), got {vocab}")
    if length < 1 or n < 1:
        raise ContractError("copy task needs length >= 1 and n >= 1")
    rng = np.random.default_rng(seed)
    body = rng.integers(N_RESERVED, vocab, size=(n, length))
    seqs = [np.concatenate(([BOS], x, [SEP], x, [EOS])).astype(np.int64) for x in body]
    n_valid = int(round(n * valid_fraction))
    start = length + 1
    train = Split(seqs[n_valid:], [start] * (n - n_valid))
    valid = Split(seqs[:n_valid], [start] * n_valid)
    itos = ["<pad>", "<bos>", "<eos>", "<sep>"] + [f"s{i}" for i in range(vocab - N_RESERVED)]
    return Corpus(train, valid, vocab, itos)


# -- character-level text -------------------------------------------------

def char_corpus(lines: Sequence[str], seed: int = 0, valid_fraction: float = 0.1,
                max_len: int = 64, max_lines: Optional[int] = None) -> Corpus:
    """Character LM corpus: one sequence per non-empty line, wrapped in bos/eos.

    The vocabulary comes from the training split; unseen characters map to UNK.
    Lines longer than ``max_len - 2`` characters are cut.
    """
    lines = [ln.rstrip("\n") for ln in lines]
    lines = [ln for ln in lines if ln.strip()]
    if max_lines is not None:
        lines = lines[:max_lines]
    if len(lines) < 2:
        raise DataError("char corpus needs at least two non-empty lines")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(lines))
    n_valid = max(1, int(round(len(lines) * valid_fraction)))
    valid_lines = [lines[i] for i in order[:n_valid]]
    train_lines = [lines[i] for i in order[n_valid:]]
    chars = sorted(set("".join(train_lines)))
    itos = ["<pad>", "<bos>", "<eos>", "<unk>"] + chars
    stoi = {c: i for i, c in enumerate(itos) if i >= N_RESERVED}
    cut = max_len - 2

    def encode(text):
        ids = [stoi.get(c, UNK) for c in text[:cut]]
        return np.array([BOS] + ids + [EOS], dtype=np.int64)

    train = Split([encode(s) for s in train_lines], [0] * len(train_lines))
    valid = Split([encode(s) for s in valid_lines], [0] * len(valid_lines))
    return Corpus(train, valid, len(itos), itos)


def load_text(path) -> list:
    return Path(path).read_text(encoding="utf-8").splitlines()


# Milton's Paradise Lost (1674 text), public domain, shipped as package data.
BUILTIN_CORPORA = {"paradise-lost": "paradise_lost.txt"}


def builtin_text(name: str) -> list:
    if name not in BUILTIN_CORPORA:
        raise DataError(f"unknown built-in corpus {name!r}; known: {sorted(BUILTIN_CORPORA)}")
    res = resources.files("rkblocks") / "corpora" / BUILTIN_CORPORA[name]
    return res.read_text(encoding="utf-8").splitlines()


_NOUNS = ["cat", "dog", "bird", "river", "king", "child", "ship", "garden", "storm", "house",
          "horse", "tree", "letter", "road", "sailor", "lamp", "village", "mountain", "friend", "door"]
_ADJS = ["old", "small", "quiet", "red", "young", "dark", "bright", "cold", "tall", "happy"]
_VERBS = ["sees", "finds", "follows", "calls", "watches", "leaves", "likes", "keeps", "hears", "opens"]
_IVERBS = ["sleeps", "waits", "runs", "sings", "falls", "shines", "rests", "wanders"]
_PREPS = ["near", "under", "behind", "beyond", "beside", "over"]
_ADVS = ["slowly", "again", "today", "at night", "in the morning", "quietly"]


def synthetic_text(n_lines: int = 10000, seed: int = 0) -> list:
    """Deterministic English-like sentences from a small stochastic grammar.

    Word choice is Zipf-weighted so the character statistics are skewed the
    way natural text is. Used when no corpus file is supplied.
    """
    rng = np.random.default_rng(seed)

    def pick(words):
        w = 1.0 / np.arange(1, len(words) + 1)
        return words[rng.choice(len(words), p=w / w.sum())]

    def noun_phrase():
        parts = ["the"]
        if rng.random() < 0.5:
            parts.append(pick(_ADJS))
        parts.append(pick(_NOUNS))
        if rng.random() < 0.2:
            parts += [pick(_PREPS), "the", pick(_NOUNS)]
        return " ".join(parts)

    out = []
    for _ in range(n_lines):
        if rng.random() < 0.6:
            s = f"{noun_phrase()} {pick(_VERBS)} {noun_phrase()}"
        else:
            s = f"{noun_phrase()} {pick(_IVERBS)}"
        if rng.random() < 0.3:
            s += " " + pick(_ADVS)
        out.append(s[0].upper() + s[1:] + ".")
    return out


# -- batching ----------------------------------------------------------------

def _collate(split: Split, idx: Sequence[int]) -> Batch:
    width = max(len(split.sequences[i]) for i in idx) - 1
    inputs = np.full((len(idx), width), PAD, dtype=np.int64)
    targets = np.full((len(idx), width), PAD, dtype=np.int64)
    mask = np.zeros((len(idx), width))
    for r, i in enumerate(idx):
        s = split.sequences[i]
        n = len(s) - 1
        inputs[r, :n] = s[:-1]
        targets[r, :n] = s[1:]
        mask[r, split.loss_from[i]:n] = 1.0
    return Batch(inputs, targets, mask)


def _group(split: Split, order: Sequence[int], batch_tokens: int) -> Iterator[list]:
    group: list = []
    width = 0
    for i in order:
        w = max(width, len(split.sequences[i]) - 1)
        if group and w * (len(group) + 1) > batch_tokens:
            yield group
            group, w = [], len(split.sequences[i]) - 1
        group.append(i)
        width = w
    if group:
        yield group


def iter_batches(split: Split, batch_tokens: int) -> Iterator[Batch]:
    """Deterministic pass over ``split`` in order (evaluation)."""
    for group in _group(split, range(len(split)), batch_tokens):
        yield _collate(split, group)


def batch_stream(split: Split, batch_tokens: int, rng: np.random.Generator) -> Iterator[Batch]:
    """Endless shuffled batches, padded to the longest sequence in each batch."""
    if len(split) == 0:
        raise DataError("training split is empty")
    while True:
        for group in _group(split, rng.permutation(len(split)), batch_tokens):
            yield _collate(split, group)
