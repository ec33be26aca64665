"""Summary-quality metrics, significance testing and length buckets.

All text metrics take token lists; strings are lowercased and split on
whitespace first.  Scores are in [0, 1]; reports convert to percent.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Sequence, Union

logger = logging.getLogger(__name__)

Tokens = Union[str, Sequence[str]]
MAX_ORDER = 4


def metric_tokens(x: Tokens) -> list[str]:
    if isinstance(x, str):
        return x.lower().split()
    return list(x)


# -- BLEU ------------------------------------------------------------------------

def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyp: Tokens, ref: Tokens, max_order: int = MAX_ORDER) -> tuple[list[int], list[int], int, int]:
    """Clipped n-gram matches and hypothesis n-gram totals for n = 1..max_order."""
    h, r = metric_tokens(hyp), metric_tokens(ref)
    matches, totals = [], []
    for n in range(1, max_order + 1):
        hc, rc = ngrams(h, n), ngrams(r, n)
        matches.append(sum(min(c, rc[g]) for g, c in hc.items()))
        totals.append(max(len(h) - n + 1, 0))
    return matches, totals, len(h), len(r)


def brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    return 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)


def _combine(precisions: Sequence[float], bp: float) -> float:
    if bp == 0.0 or min(precisions) <= 0.0:
        return 0.0
    return bp * math.exp(sum(math.log(p) for p in precisions) / len(precisions))


def sentence_bleu(hyp: Tokens, ref: Tokens, max_order: int = MAX_ORDER, smooth: bool = True) -> float:
    """Cumulative 1..4-gram BLEU of one pair; add-one smoothing on n >= 2."""
    if not metric_tokens(ref):
        raise ValueError("empty reference")
    m, t, hl, rl = bleu_stats(hyp, ref, max_order)
    if hl == 0:
        logger.warning("empty hypothesis scored as BLEU 0")
        return 0.0
    precisions = []
    for n in range(max_order):
        if n == 0 or not smooth:
            precisions.append(m[n] / t[n] if t[n] else 0.0)
        else:
            precisions.append((m[n] + 1) / (t[n] + 1))
    return _combine(precisions, brevity_penalty(hl, rl))


def corpus_bleu(hyps: Sequence[Tokens], refs: Sequence[Tokens], max_order: int = MAX_ORDER) -> float:
    """Corpus BLEU: n-gram counts and lengths summed over pairs before the mean."""
    if len(hyps) != len(refs):
        raise ValueError("hypotheses and references differ in length")
    M = [0] * max_order
    T = [0] * max_order
    c = r = 0
    for h, ref in zip(hyps, refs):
        if not metric_tokens(ref):
            raise ValueError("empty reference")
        m, t, hl, rl = bleu_stats(h, ref, max_order)
        if hl == 0:
            logger.warning("empty hypothesis in corpus BLEU")
        M = [a + b for a, b in zip(M, m)]
        T = [a + b for a, b in zip(T, t)]
        c += hl
        r += rl
    if c == 0:
        return 0.0
    return _combine([mm / tt if tt else 0.0 for mm, tt in zip(M, T)], brevity_penalty(c, r))


def bleu(hypotheses: Sequence[Tokens], references: Sequence[Tokens], level: str = "corpus") -> float:
    if level == "corpus":
        return corpus_bleu(hypotheses, references)
    if level == "sentence":
        scores = [sentence_bleu(h, r) for h, r in zip(hypotheses, references)]
        return sum(scores) / len(scores) if scores else 0.0
    raise ValueError(f"level must be 'corpus' or 'sentence', got {level!r}")


# -- ROUGE-L -----------------------------------------------------------------------

def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Tokens, ref: Tokens, beta: float = 1.0) -> float:
    h, r = metric_tokens(hyp), metric_tokens(ref)
    if not h or not r:
        return 0.0
    lcs = lcs_length(h, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(h), lcs / len(r)
    b2 = beta * beta
    return (1 + b2) * p * rec / (rec + b2 * p)


# -- METEOR ------------------------------------------------------------------------

# Above this many interchangeable occurrences of one word the exact
# chunk-minimizing search is replaced by in-order matching.
_EXACT_REPEAT_LIMIT = 12


def _greedy_alignment(h: Sequence[str], r: Sequence[str]) -> list[tuple[int, int]]:
    pos = defaultdict(list)
    for j, w in enumerate(r):
        pos[w].append(j)
    used = Counter()
    out = []
    for i, w in enumerate(h):
        if used[w] < len(pos[w]):
            out.append((i, pos[w][used[w]]))
            used[w] += 1
    return out


def count_chunks(alignment: Sequence[tuple[int, int]]) -> int:
    """Maximal runs of hypothesis-adjacent, reference-adjacent matches."""
    chunks = 0
    prev = None
    for i, j in sorted(alignment):
        if prev is None or not (i == prev[0] + 1 and j == prev[1] + 1):
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_alignment(hyp: Tokens, ref: Tokens) -> tuple[int, int]:
    """``(matches, chunks)`` of the exact-match alignment with the most
    matches and, among those, the fewest chunks."""
    h, r = metric_tokens(hyp), metric_tokens(ref)
    hc, rc = Counter(h), Counter(r)
    need = {w: min(hc[w], rc[w]) for w in hc if w in rc}
    matches = sum(need.values())
    if matches == 0:
        return 0, 0
    if max(max(hc[w], rc[w]) for w in need) > _EXACT_REPEAT_LIMIT:
        return matches, count_chunks(_greedy_alignment(h, r))

    ref_pos = defaultdict(list)
    for j, w in enumerate(r):
        ref_pos[w].append(j)
    # hyp occurrences of each word at positions >= i
    left_after = []
    seen = Counter()
    for w in reversed(h):
        seen[w] += 1
        left_after.append(seen[w])
    left_after.reverse()

    @lru_cache(maxsize=None)
    def best(i: int, used: int, prev: int) -> float:
        if i == len(h):
            return 0.0
        w = h[i]
        if w not in need:
            return best(i + 1, used, -1)
        done = sum(1 for j in ref_pos[w] if used >> j & 1)
        remaining = need[w] - done
        out = math.inf
        if left_after[i] - 1 >= remaining:
            out = best(i + 1, used, -1)
        if remaining > 0:
            for j in ref_pos[w]:
                if not used >> j & 1:
                    cost = 0 if prev >= 0 and j == prev + 1 else 1
                    out = min(out, cost + best(i + 1, used | (1 << j), j))
        return out

    chunks = best(0, 0, -1)
    best.cache_clear()
    return matches, int(chunks)


def meteor(hyp: Tokens, ref: Tokens, alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    """Exact-match METEOR: Fmean = 10PR/(R+9P), penalty 0.5*(chunks/matches)^3."""
    h, r = metric_tokens(hyp), metric_tokens(ref)
    if not h or not r:
        return 0.0
    m, chunks = meteor_alignment(h, r)
    if m == 0:
        return 0.0
    p, rec = m / len(h), m / len(r)
    fmean = p * rec / (alpha * p + (1 - alpha) * rec)
    penalty = gamma * (chunks / m) ** beta
    return fmean * (1 - penalty)


# -- classification ----------------------------------------------------------------

@dataclass
class ClassificationReport:
    precision: float
    recall: float
    f1: float
    per_class: list[dict]
    support: int


def classification_report(predictions: Sequence[int], labels: Sequence[int], n_classes: int) -> ClassificationReport:
    """Per-class P/R/F (zero division -> 0) and their support-weighted averages."""
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels differ in length")
    for v in (*predictions, *labels):
        if not 0 <= v < n_classes:
            raise ValueError(f"class id {v} outside [0, {n_classes - 1}]")
    tp = Counter(p for p, y in zip(predictions, labels) if p == y)
    pred_n = Counter(predictions)
    true_n = Counter(labels)
    per = []
    wp = wr = wf = 0.0
    total = len(labels)
    for c in range(n_classes):
        p = tp[c] / pred_n[c] if pred_n[c] else 0.0
        r = tp[c] / true_n[c] if true_n[c] else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        per.append({"class": c, "precision": p, "recall": r, "f1": f, "support": true_n[c]})
        if total:
            w = true_n[c] / total
            wp, wr, wf = wp + w * p, wr + w * r, wf + w * f
    return ClassificationReport(wp, wr, wf, per, total)


# -- Wilcoxon signed-rank -------------------------------------------------------------

EXACT_MAX_N = 12
STAR_BANDS = ((0.0001, "****"), (0.001, "***"), (0.01, "**"), (0.05, "*"))


def significance_stars(p: float) -> str:
    for edge, stars in STAR_BANDS:
        if p < edge:
            return stars
    return "ns"


def midranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


@dataclass
class WilcoxonResult:
    p: float
    stars: str
    statistic: float
    n: int
    method: str


def _exact_p(ranks: Sequence[float], w_plus: float) -> float:
    # ranks are multiples of 1/2: count sign assignments on doubled ranks
    twice = [int(round(2 * r)) for r in ranks]
    dist = {0: 1}
    for r in twice:
        nxt = defaultdict(int)
        for s, c in dist.items():
            nxt[s] += c
            nxt[s + r] += c
        dist = nxt
    obs = int(round(2 * w_plus))
    total = 2 ** len(ranks)
    lower = sum(c for s, c in dist.items() if s <= obs) / total
    upper = sum(c for s, c in dist.items() if s >= obs) / total
    return min(1.0, 2 * min(lower, upper))


def _normal_p(ranks: Sequence[float], abs_diffs: Sequence[float], w_plus: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4
    ties = Counter(abs_diffs)
    var = n * (n + 1) * (2 * n + 1) / 24 - sum(t ** 3 - t for t in ties.values()) / 48
    if var <= 0:
        return 1.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2)))


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], alpha: float = 0.05,
                         method: str = "auto") -> WilcoxonResult:
    """Two-sided paired signed-rank test on ``a - b``.

    Zero differences are dropped; ties get midranks.  ``method="auto"``
    enumerates the null distribution for n <= 12 and otherwise uses the
    normal approximation with continuity correction.  ``alpha`` only sets
    the threshold used by :attr:`WilcoxonResult.stars` banding ("ns" at or
    above it).
    """
    if len(a) != len(b) or not a:
        raise ValueError("paired samples must be non-empty and of equal length")
    diffs = [x - y for x, y in zip(a, b) if x != y]
    n = len(diffs)
    if n == 0:
        return WilcoxonResult(1.0, "ns", 0.0, 0, "degenerate")
    absd = [abs(d) for d in diffs]
    ranks = midranks(absd)
    w_plus = sum(r for r, d in zip(ranks, diffs) if d > 0)
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        p = _exact_p(ranks, w_plus)
    elif method == "normal":
        p = _normal_p(ranks, absd, w_plus)
    else:
        raise ValueError(f"unknown method {method!r}")
    stars = significance_stars(p) if p < alpha else "ns"
    return WilcoxonResult(p, stars, w_plus, n, method)


# -- length buckets --------------------------------------------------------------------

@dataclass
class Bucket:
    lo: int
    hi: int
    mean: float
    count: int

    @property
    def label(self) -> str:
        return f"[{self.lo}-{self.hi}]"


def bucket_index(length: int, width: int = 5) -> int:
    if length < 0:
        raise ValueError("negative length")
    return 0 if length <= width else (length - 1) // width


def bucket_by_length(scores: Sequence[float], lengths: Sequence[int], width: int = 5,
                     max_edge: int = 50) -> list[Bucket]:
    """Mean score per length interval [0-5], [6-10], ..., up to ``max_edge``.

    Lengths beyond ``max_edge`` are left out; empty intervals are absent.
    """
    if len(scores) != len(lengths):
        raise ValueError("scores and lengths differ in length")
    sums: dict[int, float] = defaultdict(float)
    counts: dict[int, int] = defaultdict(int)
    for s, L in zip(scores, lengths):
        if L > max_edge:
            continue
        k = bucket_index(L, width)
        sums[k] += s
        counts[k] += 1
    return [Bucket(0 if k == 0 else k * width + 1, (k + 1) * width, sums[k] / counts[k], counts[k])
            for k in sorted(counts)]


# -- reports ------------------------------------------------------------------------------

METRICS = ("BLEU", "METEOR", "ROUGE-L")


def score_pairs(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> dict[str, list[float]]:
    if len(hyps) != len(refs):
        raise ValueError("hypotheses and references differ in length")
    return {
        "BLEU": [sentence_bleu(h, r) for h, r in zip(hyps, refs)],
        "METEOR": [meteor(h, r) for h, r in zip(hyps, refs)],
        "ROUGE-L": [rouge_l(h, r) for h, r in zip(hyps, refs)],
    }


@dataclass
class ScoreReport:
    per_sample: dict[str, list[float]]
    corpus_bleu: float
    buckets: dict[str, dict[str, list[Bucket]]] = field(default_factory=dict)
    significance: dict[str, dict] = field(default_factory=dict)
    label: str = "model"

    @property
    def means(self) -> dict[str, float]:
        """Arithmetic means of the per-sample scores, in percent."""
        return {m: 100.0 * sum(v) / len(v) if v else 0.0 for m, v in self.per_sample.items()}

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "n": len(next(iter(self.per_sample.values()), [])),
            "means_percent": self.means,
            "corpus_bleu_percent": 100.0 * self.corpus_bleu,
            "per_sample": self.per_sample,
            "buckets": {k: {m: [asdict(b) for b in bs] for m, bs in d.items()} for k, d in self.buckets.items()},
            "significance": self.significance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_table(self) -> str:
        return format_table([(self.label, self.means)])


def format_table(rows: Sequence[tuple[str, dict[str, float]]], title: str | None = None) -> str:
    """Aligned text table with the BLEU / METEOR / ROUGE-L column layout."""
    width = max([len("Technique")] + [len(r[0]) for r in rows])
    head = f"{'Technique':<{width}} | " + " | ".join(f"{m:>7}" for m in METRICS)
    rule = "-" * len(head)
    lines = ([title] if title else []) + [head, rule]
    for name, vals in rows:
        cells = " | ".join(f"{vals[m]:7.2f}" if m in vals else f"{'-':>7}" for m in METRICS)
        lines.append(f"{name:<{width}} | {cells}")
    return "\n".join(lines)


def score_corpus(hyps: Sequence[str], refs: Sequence[str], codes: Sequence[str] | None = None,
                 label: str = "model", baseline: Sequence[str] | None = None) -> ScoreReport:
    """Score a hypothesis/reference list; optionally bucket by length and test
    against a baseline's hypotheses."""
    from .corpus import code_length, summary_length

    per = score_pairs(hyps, refs)
    rep = ScoreReport(per_sample=per, corpus_bleu=corpus_bleu(hyps, refs), label=label)
    rep.buckets["comment_words"] = {m: bucket_by_length(v, [summary_length(r) for r in refs])
                                    for m, v in per.items()}
    if codes is not None:
        rep.buckets["code_lines"] = {m: bucket_by_length(v, [code_length(c) for c in codes])
                                     for m, v in per.items()}
    if baseline is not None:
        base = score_pairs(baseline, refs)
        for m in METRICS:
            res = wilcoxon_signed_rank(per[m], base[m])
            rep.significance[m] = asdict(res)
    return rep
