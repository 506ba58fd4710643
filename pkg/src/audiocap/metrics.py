"""Corpus-level caption metrics over multi-reference sets.

Implements corpus BLEU-1..4 with clipped n-gram counts, ROUGE-L (LCS
F-measure, beta=1.2), a CIDEr-D style TF-IDF n-gram cosine score, and
"meteor_lite": an exact-unigram-match harmonic mean with a fragmentation
penalty but no stemmer or synonym table, hence the distinct name.

Candidates and references are token sequences (any hashable tokens); use
:func:`audiocap.data.normalize` to tokenize raw strings.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

Tokens = Sequence[Hashable]


class MetricsError(ValueError):
    """Corpus does not satisfy a metric's preconditions."""


@dataclass
class EvalItem:
    candidate: list
    references: list[list]

    def __post_init__(self):
        if not self.references:
            raise MetricsError("every item needs at least one reference")


@dataclass
class EvalCorpus:
    items: list[EvalItem]

    def __post_init__(self):
        if not self.items:
            raise MetricsError("corpus is empty")

    @classmethod
    def from_token_lists(cls, pairs: Sequence[tuple[Tokens, Sequence[Tokens]]]) -> "EvalCorpus":
        return cls([EvalItem(list(c), [list(r) for r in refs]) for c, refs in pairs])


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    meteor_lite: float
    cider: float

    CSV_COLUMNS = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "meteor_lite", "cider")

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.CSV_COLUMNS}


def _ngram_counts(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU ------------------------------------------------------------------------


def bleu(corpus: EvalCorpus, n_max: int = 4) -> tuple[float, ...]:
    """Corpus BLEU-1..n_max: clipped precisions, geometric mean, brevity penalty.

    An order with candidate n-grams but zero matches contributes precision
    1/(2 * total candidate n-grams of that order); an order with no candidate
    n-grams at all zeroes BLEU for that order and above.
    """
    matched = [0] * n_max
    totals = [0] * n_max
    cand_len = 0
    ref_len = 0
    for item in corpus.items:
        c = len(item.candidate)
        cand_len += c
        # closest reference length; ties go to the shorter reference
        ref_len += min((abs(len(r) - c), len(r)) for r in item.references)[1]
        for n in range(1, n_max + 1):
            counts = _ngram_counts(item.candidate, n)
            if not counts:
                continue
            max_ref = Counter()
            for ref in item.references:
                for gram, cnt in _ngram_counts(ref, n).items():
                    if cnt > max_ref[gram]:
                        max_ref[gram] = cnt
            totals[n - 1] += sum(counts.values())
            matched[n - 1] += sum(min(cnt, max_ref[gram]) for gram, cnt in counts.items())
    bp = 1.0 if cand_len >= ref_len or cand_len == 0 else math.exp(1.0 - ref_len / cand_len)
    precisions = []
    for n in range(n_max):
        if totals[n] == 0:
            precisions.append(0.0)
        elif matched[n] == 0:
            precisions.append(1.0 / (2.0 * totals[n]))
        else:
            precisions.append(matched[n] / totals[n])
    scores = []
    for k in range(1, n_max + 1):
        if any(p == 0.0 for p in precisions[:k]):
            scores.append(0.0)
        else:
            log_mean = sum(math.log(p) for p in precisions[:k]) / k
            scores.append(bp * math.exp(log_mean))
    return tuple(scores)


# -- ROUGE-L ------------------------------------------------------------------------


def lcs_length(a: Tokens, b: Tokens) -> int:
    """Longest common subsequence length via the classic DP table."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(corpus: EvalCorpus, beta: float = 1.2) -> float:
    """Mean over items of the best per-reference LCS F-measure."""
    total = 0.0
    for item in corpus.items:
        best = 0.0
        for ref in item.references:
            lcs = lcs_length(item.candidate, ref)
            if lcs == 0:
                continue
            p = lcs / len(item.candidate)
            r = lcs / len(ref)
            f = (1 + beta * beta) * p * r / (r + beta * beta * p)
            best = max(best, f)
        total += best
    return total / len(corpus.items)


# -- CIDEr (D variant) ------------------------------------------------------------------


def cider(corpus: EvalCorpus, n_max: int = 4, sigma: float = 6.0) -> float:
    """TF-IDF n-gram cosine with count clipping and a length gaussian, x10.

    IDF comes from the reference corpus with one document per item's
    reference set; candidate counts are clipped by reference counts in the
    cosine numerator.
    """
    n_docs = len(corpus.items)
    if n_docs < 2:
        raise MetricsError("cider needs at least 2 items for a document population")
    doc_freq: list[Counter] = [Counter() for _ in range(n_max)]
    for item in corpus.items:
        for n in range(1, n_max + 1):
            grams = set()
            for ref in item.references:
                grams.update(_ngram_counts(ref, n))
            for gram in grams:
                doc_freq[n - 1][gram] += 1

    def tfidf(tokens: Tokens, n: int) -> tuple[dict, float]:
        vec = {}
        for gram, cnt in _ngram_counts(tokens, n).items():
            idf = math.log(n_docs) - math.log(max(1.0, doc_freq[n - 1][gram]))
            vec[gram] = cnt * idf
        norm = math.sqrt(sum(v * v for v in vec.values()))
        return vec, norm

    score_sum = 0.0
    for item in corpus.items:
        per_order = [0.0] * n_max
        for n in range(1, n_max + 1):
            cand_vec, cand_norm = tfidf(item.candidate, n)
            for ref in item.references:
                ref_vec, ref_norm = tfidf(ref, n)
                num = sum(min(v, ref_vec.get(gram, 0.0)) * ref_vec.get(gram, 0.0)
                          for gram, v in cand_vec.items())
                if cand_norm > 0.0 and ref_norm > 0.0:
                    sim = num / (cand_norm * ref_norm)
                else:
                    sim = 0.0
                delta = len(item.candidate) - len(ref)
                per_order[n - 1] += sim * math.exp(-delta * delta / (2.0 * sigma * sigma))
        item_score = sum(per_order) / n_max / len(item.references)
        score_sum += item_score * 10.0
    return score_sum / n_docs


# -- METEOR-lite ------------------------------------------------------------------------


def _align_greedy(candidate: Tokens, reference: Tokens) -> list[tuple[int, int]]:
    """Greedy earliest-reference-position exact matching, left to right."""
    used = [False] * len(reference)
    pairs = []
    for i, word in enumerate(candidate):
        for j, ref_word in enumerate(reference):
            if not used[j] and word == ref_word:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def _chunk_count(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite(corpus: EvalCorpus) -> float:
    """Exact-match unigram F-mean (recall-weighted 9:1) with fragmentation penalty."""
    total = 0.0
    for item in corpus.items:
        best = 0.0
        for ref in item.references:
            pairs = _align_greedy(item.candidate, ref)
            m = len(pairs)
            if m == 0:
                continue
            p = m / len(item.candidate)
            r = m / len(ref)
            f_mean = 10.0 * p * r / (r + 9.0 * p)
            penalty = 0.5 * (_chunk_count(pairs) / m) ** 3
            best = max(best, f_mean * (1.0 - penalty))
        total += best
    return total / len(corpus.items)


# -- aggregate ---------------------------------------------------------------------------


def evaluate(corpus: EvalCorpus) -> MetricReport:
    """Score a corpus on every supported metric."""
    b1, b2, b3, b4 = bleu(corpus)
    return MetricReport(bleu1=b1, bleu2=b2, bleu3=b3, bleu4=b4,
                        rouge_l=rouge_l(corpus),
                        meteor_lite=meteor_lite(corpus),
                        cider=cider(corpus))
