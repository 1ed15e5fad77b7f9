"""Corpus-level decoding and scoring shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import EOS_ID, ParallelCorpus, Vocabulary, corpus_digest
from .decoding import DecodeResult, beam_decode, greedy_decode
from .metrics import (
    corpus_bleu,
    entropy_report,
    export_heatmap,
    repetition_rate,
    rouge_l,
    write_cdf_csv,
)
from .model import ModelParameters


@dataclass
class CorpusOutputs:
    corpus: ParallelCorpus
    results: list[DecodeResult]
    hypotheses: list[list[str]]


def decode_corpus(
    params: ModelParameters,
    vocab: Vocabulary,
    corpus: ParallelCorpus,
    beam: int = 1,
    max_len: int = 40,
    greedy: bool = False,
) -> CorpusOutputs:
    results = []
    hyps = []
    for src, _ in corpus:
        ids = vocab.encode(src)
        if greedy:
            res = greedy_decode(ids, params, max_len)
        else:
            res = beam_decode(ids, params, beam, max_len)
        results.append(res)
        hyps.append(vocab.decode(res.output(params.config.eos_id)))
    return CorpusOutputs(corpus, results, hyps)


def token_accuracy(outputs: CorpusOutputs, vocab: Vocabulary) -> float:
    """Position-wise agreement with the reference plus its end-of-sequence token."""
    hit = total = 0
    for (_, ref), res in zip(outputs.corpus, outputs.results):
        gold = vocab.encode(ref, add_eos=True)
        for i, g in enumerate(gold):
            total += 1
            hit += i < len(res.tokens) and res.tokens[i] == g
    return hit / total


def score(outputs: CorpusOutputs, vocab: Vocabulary) -> dict:
    refs = outputs.corpus.targets()
    hyps = outputs.hypotheses
    stats = entropy_report(r.attention for r in outputs.results)
    reps = [repetition_rate(h) if h else 0.0 for h in hyps]
    return {
        "bleu": corpus_bleu(hyps, refs),
        "rouge_l": float(np.mean([rouge_l(h, r) for h, r in zip(hyps, refs)])),
        "mean_entropy": stats.mean,
        "repetition_rate": float(np.mean(reps)),
        "token_accuracy": token_accuracy(outputs, vocab),
        "exact_match": float(np.mean([h == r for h, r in zip(hyps, refs)])),
        "n_sentences": len(hyps),
        "test_digest": corpus_digest(outputs.corpus),
    }


def write_outputs_tsv(outputs: CorpusOutputs, path: str | Path) -> None:
    lines = [
        " ".join(s) + "\t" + " ".join(t) + "\t" + " ".join(h) + "\n"
        for (s, t), h in zip(outputs.corpus, outputs.hypotheses)
    ]
    Path(path).write_text("".join(lines), encoding="utf-8")


def write_analysis(outputs: CorpusOutputs, vocab: Vocabulary, out_dir: str | Path) -> dict:
    """Entropy CDF plus one attention heatmap (and gate companion) per sentence."""
    out = Path(out_dir)
    heat = out / "heatmaps"
    heat.mkdir(parents=True, exist_ok=True)
    for old in heat.glob("*.csv"):
        old.unlink()
    stats = entropy_report(r.attention for r in outputs.results)
    write_cdf_csv(stats, out / "entropy_cdf.csv")
    for i, ((src, _), res) in enumerate(zip(outputs.corpus, outputs.results)):
        out_tokens = [vocab.itos[t] for t in res.tokens]
        export_heatmap(res.attention, src, out_tokens, heat / f"{i:04d}.csv", res.gates)
    return {
        "mean_entropy": stats.mean,
        "n_distributions": int(stats.entropies.size),
        "fraction_at_most_0.5": stats.fraction_at_most(0.5),
    }


def mean_of(values: Sequence[float]) -> float:
    return float(np.mean(values))


__all__ = [
    "CorpusOutputs",
    "EOS_ID",
    "decode_corpus",
    "score",
    "token_accuracy",
    "write_analysis",
    "write_outputs_tsv",
]
