"""BLEU, ROUGE-L, attention entropy, repetition rate, and CSV/JSON exports."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


def attention_entropy(distribution, base: float | None = None, tol: float = 1e-6) -> float:
    """Shannon entropy ``-sum a log a`` with ``0 log 0 = 0``; natural log by default."""
    a = np.asarray(distribution, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("entropy needs a non-empty 1-d distribution")
    if (a < 0).any() or abs(a.sum() - 1.0) > tol:
        raise ValueError(f"not a probability vector (sum={a.sum()!r})")
    nz = a[a > 0]
    h = float(-(nz * np.log(nz)).sum())
    if base is not None:
        h /= math.log(base)
    return h


@dataclass
class EntropyStats:
    entropies: np.ndarray  # one value per decoder step, in trace order
    mean: float
    sorted_values: np.ndarray

    def cdf(self) -> list[tuple[float, float]]:
        """``(value, fraction of entropies <= value)`` for each distinct value."""
        vals = self.sorted_values
        n = len(vals)
        rows = []
        for i, v in enumerate(vals):
            if i + 1 < n and vals[i + 1] == v:
                continue
            rows.append((float(v), (i + 1) / n))
        return rows

    def fraction_at_most(self, x: float) -> float:
        return float(np.searchsorted(self.sorted_values, x, side="right")) / len(self.sorted_values)


def entropy_report(attention_rows: Iterable[np.ndarray], base: float | None = None) -> EntropyStats:
    """Entropy statistics over a set of attention matrices (steps x source positions).

    Rows must already be restricted to real (unpadded) source positions.
    """
    ents = []
    for matrix in attention_rows:
        m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        ents.extend(attention_entropy(row, base) for row in m)
    if not ents:
        raise ValueError("no attention distributions to summarise")
    arr = np.asarray(ents)
    return EntropyStats(arr, float(arr.mean()), np.sort(arr))


def write_cdf_csv(stats: EntropyStats, path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["value", "cum_fraction"])
    for v, f in stats.cdf():
        w.writerow([repr(v), repr(f)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_cdf_csv(path: str | Path) -> list[tuple[float, float]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return [(float(a), float(b)) for a, b in rows[1:]]


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses, references, max_n: int = 4) -> dict:
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference counts differ")
    if not hypotheses:
        raise ValueError("empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return {"matches": matches, "totals": totals, "hyp_len": hyp_len, "ref_len": ref_len}


def corpus_bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU in [0, 1]: clipped n-gram precisions, geometric mean, brevity penalty.

    Token lists are compared as given; there is no smoothing, so any order
    with zero matches gives 0.
    """
    st = bleu_stats(hypotheses, references, max_n)
    if st["hyp_len"] == 0:
        return 0.0
    if any(m == 0 for m in st["matches"]):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(st["matches"], st["totals"])) / max_n
    c, r = st["hyp_len"], st["ref_len"]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    """LCS-based F1 (beta = 1)."""
    if not hypothesis or not reference:
        return 0.0
    lcs = lcs_length(hypothesis, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hypothesis), lcs / len(reference)
    return 2 * p * r / (p + r)


def repetition_rate(tokens: Sequence, window: int = 2) -> float:
    """Fraction of positions whose token already occurs among the previous ``window``."""
    if not tokens:
        raise ValueError("repetition rate of an empty sequence")
    hits = sum(1 for i, t in enumerate(tokens) if t in tokens[max(0, i - window):i])
    return hits / len(tokens)


# ---------------------------------------------------------------------------
# heatmaps


def heatmap_text(matrix: np.ndarray, source_tokens: Sequence[str], output_tokens: Sequence[str]) -> str:
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if m.shape != (len(output_tokens), len(source_tokens)):
        raise ValueError(f"matrix {m.shape} vs {len(output_tokens)} outputs x {len(source_tokens)} sources")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["output"] + list(source_tokens))
    for tok, row in zip(output_tokens, m):
        w.writerow([tok] + [repr(float(x)) for x in row])
    return buf.getvalue()


def export_heatmap(
    attention: np.ndarray,
    source_tokens: Sequence[str],
    output_tokens: Sequence[str],
    path: str | Path,
    gates: Optional[np.ndarray] = None,
) -> list[Path]:
    """Write the attention matrix (rows = decoder steps, columns = source tokens).

    When ``gates`` is given a companion ``<stem>.gates.csv`` with the same
    layout holds the per-position keep probabilities.
    """
    path = Path(path)
    path.write_text(heatmap_text(attention, source_tokens, output_tokens), encoding="utf-8")
    written = [path]
    if gates is not None:
        gpath = path.with_name(path.stem + ".gates.csv")
        gpath.write_text(heatmap_text(gates, source_tokens, output_tokens), encoding="utf-8")
        written.append(gpath)
    return written


def read_heatmap(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    sources = rows[0][1:]
    outputs = [r[0] for r in rows[1:]]
    matrix = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=np.float64)
    return sources, outputs, matrix.reshape(len(outputs), len(sources))


def summary_json(bleu: float, rouge: float, mean_entropy: float, repetition: float, **extra) -> str:
    body = {"bleu": bleu, "rouge_l": rouge, "mean_entropy": mean_entropy, "repetition_rate": repetition}
    body.update(extra)
    return json.dumps(body, sort_keys=True, indent=2) + "\n"
