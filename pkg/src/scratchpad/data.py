"""Synthetic transduction tasks, TSV corpora, vocabularies and batching."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import Rng

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

Pair = tuple[list[str], list[str]]


class CorpusError(ValueError):
    pass


@dataclass
class ParallelCorpus:
    pairs: list[Pair]
    split: str = "train"

    def __post_init__(self):
        for i, (src, tgt) in enumerate(self.pairs):
            if not src or not tgt:
                raise CorpusError(f"pair {i} of the {self.split} split has an empty side")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def sources(self) -> list[list[str]]:
        return [s for s, _ in self.pairs]

    def targets(self) -> list[list[str]]:
        return [t for _, t in self.pairs]


class Vocabulary:
    """Token/id bijection with the four reserved ids 0..3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str], add_eos: bool = False) -> list[int]:
        ids = [self.stoi.get(t, UNK_ID) for t in tokens]
        if add_eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS_ID:
                break
            if strip and i in (PAD_ID, BOS_ID):
                continue
            out.append(self.itos[i])
        return out

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> Vocabulary:
        if tuple(itos[:4]) != RESERVED:
            raise CorpusError("vocabulary must start with the reserved tokens")
        if len(set(itos)) != len(itos):
            raise CorpusError("vocabulary has duplicate tokens")
        return cls(itos[4:])


def build_vocab(corpus: ParallelCorpus, side: str = "both") -> Vocabulary:
    """Every token seen at least once in ``corpus``, in first-seen order."""
    vocab = Vocabulary()
    for src, tgt in corpus:
        if side in ("both", "source"):
            for tok in src:
                vocab.add(tok)
        if side in ("both", "target"):
            for tok in tgt:
                vocab.add(tok)
    return vocab


# ---------------------------------------------------------------------------
# synthetic tasks


def _symbols(vocab_size: int) -> list[str]:
    return [f"t{i}" for i in range(vocab_size)]


def _random_sources(n, len_range, vocab_size, rng: Rng, repeat_prob: float = 0.0):
    lo, hi = len_range
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    if not 1 <= lo <= hi:
        raise ValueError("need 1 <= min length <= max length")
    symbols = _symbols(vocab_size)
    out = []
    for i in range(n):
        g = rng.child("example", i)
        length = int(g.integers(lo, hi + 1))
        ids = g.integers(0, vocab_size, size=length)
        if repeat_prob:
            copies = g.random(length) < repeat_prob
            for j in range(1, length):
                if copies[j]:
                    ids[j] = ids[j - 1]
        out.append([symbols[k] for k in ids])
    return out


def gen_copy(n_examples: int, len_range=(4, 12), vocab_size: int = 20, seed: int = 0, split: str = "train"):
    src = _random_sources(n_examples, len_range, vocab_size, Rng(seed, ("copy", split)))
    return ParallelCorpus([(s, list(s)) for s in src], split)


def gen_reverse(n_examples: int, len_range=(4, 12), vocab_size: int = 20, seed: int = 0, split: str = "train"):
    src = _random_sources(n_examples, len_range, vocab_size, Rng(seed, ("reverse", split)))
    return ParallelCorpus([(s, s[::-1]) for s in src], split)


def collapse_repeats(tokens: Sequence[str]) -> list[str]:
    out: list[str] = []
    for tok in tokens:
        if not out or out[-1] != tok:
            out.append(tok)
    return out


def gen_dedup(
    n_examples: int,
    len_range=(4, 12),
    vocab_size: int = 20,
    seed: int = 0,
    split: str = "train",
    repeat_prob: float = 0.5,
):
    """Target is the source with runs of equal tokens collapsed.

    Each source position repeats its predecessor with ``repeat_prob`` so runs
    are common enough to matter.
    """
    src = _random_sources(n_examples, len_range, vocab_size, Rng(seed, ("dedup", split)), repeat_prob)
    return ParallelCorpus([(s, collapse_repeats(s)) for s in src], split)


GENERATORS = {"copy": gen_copy, "reverse": gen_reverse, "dedup": gen_dedup}


def load_tsv(path: str | Path, split: str = "train") -> ParallelCorpus:
    """One ``source<TAB>target`` pair per line, whitespace-tokenised."""
    text = Path(path).read_text(encoding="utf-8")
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise CorpusError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(cols)}")
        src, tgt = cols[0].split(), cols[1].split()
        if not src or not tgt:
            raise CorpusError(f"{path}:{lineno}: empty source or target")
        pairs.append((src, tgt))
    if not pairs:
        raise CorpusError(f"{path}: no sentence pairs")
    return ParallelCorpus(pairs, split)


def write_tsv(corpus: ParallelCorpus, path: str | Path) -> None:
    lines = [" ".join(s) + "\t" + " ".join(t) + "\n" for s, t in corpus]
    Path(path).write_text("".join(lines), encoding="utf-8")


def corpus_digest(corpus: ParallelCorpus) -> str:
    import hashlib

    h = hashlib.sha256()
    for s, t in corpus:
        h.update((" ".join(s) + "\t" + " ".join(t) + "\n").encode("utf-8"))
    return h.hexdigest()


def make_task(task_cfg, seed: int) -> dict[str, ParallelCorpus]:
    if task_cfg.kind == "tsv":
        return {
            "train": load_tsv(task_cfg.train_path, "train"),
            "valid": load_tsv(task_cfg.valid_path, "valid"),
            "test": load_tsv(task_cfg.test_path, "test"),
        }
    gen = GENERATORS[task_cfg.kind]
    extra = {"repeat_prob": task_cfg.repeat_prob} if task_cfg.kind == "dedup" else {}
    lens = (task_cfg.min_len, task_cfg.max_len)
    return {
        split: gen(n, lens, task_cfg.vocab_size, seed, split=split, **extra)
        for split, n in (
            ("train", task_cfg.n_train),
            ("valid", task_cfg.n_valid),
            ("test", task_cfg.n_test),
        )
    }


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    src: np.ndarray  # (B, S) ids
    src_mask: np.ndarray
    tgt: np.ndarray  # (B, T) ids ending in EOS
    tgt_mask: np.ndarray
    indices: list[int] = field(default_factory=list)

    @property
    def n_target_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.intp)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def encode_corpus(corpus: ParallelCorpus, vocab: Vocabulary) -> list[tuple[list[int], list[int]]]:
    return [(vocab.encode(s), vocab.encode(t, add_eos=True)) for s, t in corpus]


def make_batch(examples: Sequence[tuple[list[int], list[int]]], indices: Sequence[int]) -> Batch:
    src, src_mask = pad_batch([examples[i][0] for i in indices])
    tgt, tgt_mask = pad_batch([examples[i][1] for i in indices])
    return Batch(src, src_mask, tgt, tgt_mask, list(indices))


def token_batches(
    examples: Sequence[tuple[list[int], list[int]]],
    max_tokens: int,
    rng: Rng | None = None,
) -> list[list[int]]:
    """Group example indices so no batch holds more than ``max_tokens``
    source tokens or target tokens (padding included).

    Examples are sorted by length (ties broken by ``rng`` when given) and the
    resulting batch order is shuffled by ``rng``.
    """
    n = len(examples)
    tiebreak = rng.child("tiebreak").permutation(n) if rng else np.arange(n)
    order = sorted(range(n), key=lambda i: (len(examples[i][0]), len(examples[i][1]), tiebreak[i]))
    batches: list[list[int]] = []
    cur: list[int] = []
    max_s = max_t = 0
    for i in order:
        s, t = len(examples[i][0]), len(examples[i][1])
        ms, mt = max(max_s, s), max(max_t, t)
        if cur and (ms * (len(cur) + 1) > max_tokens or mt * (len(cur) + 1) > max_tokens):
            batches.append(cur)
            cur, ms, mt = [], s, t
        cur.append(i)
        max_s, max_t = ms, mt
    if cur:
        batches.append(cur)
    if rng is not None:
        perm = rng.child("order").permutation(len(batches))
        batches = [batches[j] for j in perm]
    return batches
