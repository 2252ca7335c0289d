"""Corpus captioning metrics: BLEU-1..4, ROUGE-L, CIDEr-D.

All metrics share one tokenizer ("v1"): lowercase, drop ASCII punctuation,
split on whitespace. References are given per candidate as a list of
strings (or pre-tokenized lists).
"""
from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

TOKENIZER_VERSION = "v1"
_PUNCT = str.maketrans("", "", string.punctuation)


def tokenize(text) -> list[str]:
    if not isinstance(text, str):
        return [str(t) for t in text]
    return text.lower().translate(_PUNCT).split()


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _prepare(candidates, references):
    if len(candidates) == 0:
        raise ValueError("empty corpus")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} reference sets")
    cands = [tokenize(c) for c in candidates]
    refs = []
    for r in references:
        if isinstance(r, str):
            r = [r]
        if len(r) == 0:
            raise ValueError("every candidate needs at least one reference")
        refs.append([tokenize(x) for x in r])
    return cands, refs


@dataclass(frozen=True)
class CorpusEval:
    bleu: tuple[float, float, float, float]
    rouge_l: float
    cider: float
    n_samples: int = 0

    def report(self) -> dict:
        out = {f"bleu{i + 1}": b for i, b in enumerate(self.bleu)}
        out.update(rouge_l=self.rouge_l, cider=self.cider, n_samples=self.n_samples, tokenizer=TOKENIZER_VERSION)
        return out


def bleu_n(candidates, references, n: int = 4) -> float:
    """Corpus BLEU with uniform weights over orders 1..n, no smoothing."""
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    cands, refs = _prepare(candidates, references)
    return _bleu_all(cands, refs)[n - 1]


def _bleu_all(cands, refs) -> list[float]:
    match = [0] * 4
    total = [0] * 4
    c_len = r_len = 0
    for cand, rs in zip(cands, refs):
        c_len += len(cand)
        # closest reference length, shorter one on ties
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in rs)[1]
        for k in range(4):
            counts = _ngrams(cand, k + 1)
            max_ref: Counter = Counter()
            for r in rs:
                max_ref |= _ngrams(r, k + 1)
            match[k] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[k] += max(len(cand) - k, 0)
    if c_len == 0:
        return [0.0] * 4
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    scores = []
    log_sum = 0.0
    for k in range(4):
        if match[k] == 0 or total[k] == 0:
            scores.extend([0.0] * (4 - k))
            break
        log_sum += math.log(match[k] / total[k])
        scores.append(bp * math.exp(log_sum / (k + 1)))
    return scores


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _rouge_pair(cand, ref, beta):
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(candidates, references, beta: float = 1.2) -> float:
    """Mean over samples of the best LCS F-beta against any reference."""
    cands, refs = _prepare(candidates, references)
    return sum(max(_rouge_pair(c, r, beta) for r in rs) for c, rs in zip(cands, refs)) / len(cands)


def _cider_vec(counts: list[Counter], df, log_n_docs):
    vec, norms = [], []
    for k, cnt in enumerate(counts):
        v = {g: tf * (log_n_docs - math.log(max(1.0, df[k].get(g, 0.0)))) for g, tf in cnt.items()}
        vec.append(v)
        norms.append(math.sqrt(sum(x * x for x in v.values())))
    return vec, norms


def cider_scores(candidates, references, n: int = 4, sigma: float = 6.0) -> list[float]:
    """Per-sample CIDEr-D (clipped tf-idf cosine, gaussian length penalty, x10).

    Document frequencies come from the reference sets of this corpus.
    """
    cands, refs = _prepare(candidates, references)
    df = [Counter() for _ in range(n)]
    for rs in refs:
        for k in range(n):
            df[k].update({g for r in rs for g in _ngrams(r, k + 1)})
    log_n_docs = math.log(float(len(refs)))

    scores = []
    for cand, rs in zip(cands, refs):
        vc, nc = _cider_vec([_ngrams(cand, k + 1) for k in range(n)], df, log_n_docs)
        acc = 0.0
        for r in rs:
            vr, nr = _cider_vec([_ngrams(r, k + 1) for k in range(n)], df, log_n_docs)
            delta = len(cand) - len(r)
            per_order = 0.0
            for k in range(n):
                dot = sum(min(x, vr[k][g]) * vr[k][g] for g, x in vc[k].items() if g in vr[k])
                if nc[k] != 0 and nr[k] != 0:
                    per_order += dot / (nc[k] * nr[k])
            acc += per_order / n * math.exp(-(delta ** 2) / (2 * sigma ** 2))
        scores.append(10.0 * acc / len(rs))
    return scores


def cider(candidates, references, n: int = 4, sigma: float = 6.0) -> float:
    s = cider_scores(candidates, references, n, sigma)
    return sum(s) / len(s)


def evaluate_corpus(candidates, references) -> CorpusEval:
    cands, refs = _prepare(candidates, references)
    b = _bleu_all(cands, refs)
    return CorpusEval((b[0], b[1], b[2], b[3]), rouge_l(cands, refs), cider(cands, refs), len(cands))


def embedding_similarity(candidate: str, image_embedding, reference_embeddings=None) -> float:
    """CLIP-S / RefCLIP-S hook; needs a pretrained image-text encoder."""
    raise NotImplementedError("not implemented: requires pretrained encoder")
