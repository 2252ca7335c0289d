import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from brainroi import metrics

CANDS = ["a man riding a horse", "the cat is on the mat today", "two dogs"]
REFS = [["a man rides a horse", "a person riding a horse"], ["the cat is on the mat"],
        ["two dogs play in a park", "the two brown dogs"]]

# clipped n-gram matches over the three samples, worked by hand
P = [13 / 14, 9 / 11, 5 / 8, 1 / 2]
BP = math.exp(1 - 15 / 14)  # c = 14, closest reference lengths 5 + 6 + 4 = 15
HAND_BLEU = [BP * math.prod(P[:n]) ** (1 / n) for n in range(1, 5)]


def _f(p, r, b2=1.44):
    return (1 + b2) * p * r / (r + b2 * p)


HAND_ROUGE = (0.8 + _f(6 / 7, 1.0) + max(_f(1.0, 1 / 3), _f(1.0, 0.5))) / 3
# frozen from the dense oracle below
HAND_CIDER = 4.7670580412504036


def cider_dense(cands, refs, sigma=6.0):
    """Dense-vector CIDEr-D: one global n-gram index, idf from reference sets."""
    cands = [c.split() for c in cands]
    refs = [[r.split() for r in rs] for rs in refs]
    grams = lambda t, n: [tuple(t[i:i + n]) for i in range(len(t) - n + 1)]  # noqa: E731
    index = {}
    for t in [c for c in cands] + [r for rs in refs for r in rs]:
        for n in range(1, 5):
            for g in grams(t, n):
                index.setdefault(g, len(index))
    df = np.zeros(len(index))
    for rs in refs:
        seen = np.zeros(len(index), bool)
        for r in rs:
            for n in range(1, 5):
                seen[[index[g] for g in grams(r, n)]] = True
        df += seen
    idf = np.log(len(refs)) - np.log(np.maximum(df, 1))

    def vec(t, n):
        v = np.zeros(len(index))
        for g in grams(t, n):
            v[index[g]] += 1
        return v * idf

    out = []
    for c, rs in zip(cands, refs):
        s = 0.0
        for r in rs:
            per = 0.0
            for n in range(1, 5):
                a, b = vec(c, n), vec(r, n)
                if np.linalg.norm(a) > 0 and np.linalg.norm(b) > 0:
                    per += np.minimum(a, b) @ b / (np.linalg.norm(a) * np.linalg.norm(b))
            s += per / 4 * math.exp(-((len(c) - len(r)) ** 2) / (2 * sigma ** 2))
        out.append(10 * s / len(rs))
    return float(np.mean(out))


def test_hand_fixture():
    ev = metrics.evaluate_corpus(CANDS, REFS)
    for got, want in zip(ev.bleu, HAND_BLEU):
        assert abs(got - want) < 1e-9
    assert abs(ev.rouge_l - HAND_ROUGE) < 1e-9
    assert abs(ev.cider - HAND_CIDER) < 1e-9
    assert abs(cider_dense(CANDS, REFS) - HAND_CIDER) < 1e-9


def test_identity_corpus():
    texts = ["a red bus on the street", "two small dogs in a field", "the man is sitting"]
    ev = metrics.evaluate_corpus(texts, [[t] for t in texts])
    assert ev.bleu == (1.0, 1.0, 1.0, 1.0) and ev.rouge_l == 1.0
    assert ev.cider > 0


def test_disjoint_corpus_is_zero():
    ev = metrics.evaluate_corpus(["x y z w"], [["a b c d"]])
    assert ev.bleu == (0.0, 0.0, 0.0, 0.0) and ev.rouge_l == 0.0 and ev.cider == 0.0


def test_single_sample_cider_is_zero():
    # with one reference set every n-gram has df = 1 and idf = log 1 - log 1
    assert metrics.cider(["a b c"], [["a b c"]]) == 0.0


def test_short_candidate_has_no_higher_orders():
    assert metrics.bleu_n(["a"], [["a"]], 1) == 1.0
    assert metrics.bleu_n(["a"], [["a"]], 2) == 0.0


def test_empty_candidate():
    ev = metrics.evaluate_corpus([""], [["a b"]])
    assert ev.bleu == (0.0, 0.0, 0.0, 0.0) and ev.rouge_l == 0.0


def test_input_errors():
    with pytest.raises(ValueError):
        metrics.evaluate_corpus([], [])
    with pytest.raises(ValueError):
        metrics.evaluate_corpus(["a"], [["a"], ["b"]])
    with pytest.raises(ValueError):
        metrics.evaluate_corpus(["a"], [[]])
    with pytest.raises(ValueError):
        metrics.bleu_n(["a"], [["a"]], 5)


def test_tokenizer():
    assert metrics.tokenize("A man, riding!") == ["a", "man", "riding"]
    assert metrics.tokenize(["x", "y"]) == ["x", "y"]
    assert metrics.evaluate_corpus(["A Man."], [["a man"]]).bleu[1] == 1.0


def test_lcs_examples():
    assert metrics.lcs_length("abcbdab", "bdcaba") == 4
    assert metrics.lcs_length("", "abc") == 0


def test_report_keys():
    rep = metrics.evaluate_corpus(CANDS, REFS).report()
    assert set(rep) == {"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider", "n_samples", "tokenizer"}
    assert rep["n_samples"] == 3 and rep["tokenizer"] == metrics.TOKENIZER_VERSION


def test_clip_scores_are_a_stub():
    with pytest.raises(NotImplementedError, match="pretrained encoder"):
        metrics.embedding_similarity("a", None)


words = st.lists(st.sampled_from("a b c d e f".split()), min_size=1, max_size=9).map(" ".join)
corpora = st.lists(st.tuples(words, st.lists(words, min_size=1, max_size=3)), min_size=1, max_size=5)


@given(corpora)
def test_metric_ranges(corpus):
    cands = [c for c, _ in corpus]
    refs = [r for _, r in corpus]
    ev = metrics.evaluate_corpus(cands, refs)
    assert all(0.0 <= b <= 1.0 for b in ev.bleu)
    assert 0.0 <= ev.rouge_l <= 1.0 + 1e-12
    assert ev.cider >= 0.0


@given(corpora, st.randoms())
def test_corpus_order_free(corpus, rnd):
    shuffled = list(corpus)
    rnd.shuffle(shuffled)
    a = metrics.evaluate_corpus([c for c, _ in corpus], [r for _, r in corpus])
    b = metrics.evaluate_corpus([c for c, _ in shuffled], [r for _, r in shuffled])
    assert np.allclose(a.bleu, b.bleu, atol=1e-12)
    assert abs(a.rouge_l - b.rouge_l) < 1e-12 and abs(a.cider - b.cider) < 1e-9


@given(corpora)
def test_cider_matches_dense_oracle(corpus):
    cands = [c for c, _ in corpus]
    refs = [r for _, r in corpus]
    assert abs(metrics.cider(cands, refs) - cider_dense(cands, refs)) < 1e-9


def test_duplicated_corpus_against_oracle():
    # df doubles with N, but candidate-only n-grams (df clamped to 1) gain idf
    b = metrics.cider(CANDS * 2, REFS * 2)
    assert abs(b - cider_dense(CANDS * 2, REFS * 2)) < 1e-9
    assert b != metrics.cider(CANDS, REFS)


@given(words, st.lists(words, min_size=1, max_size=3))
def test_bleu1_is_clipped_precision_with_brevity(cand, refs):
    c = cand.split()
    rs = [r.split() for r in refs]
    maxref = Counter()
    for r in rs:
        maxref |= Counter(r)
    p1 = sum(min(v, maxref[w]) for w, v in Counter(c).items()) / len(c)
    r_len = min((abs(len(r) - len(c)), len(r)) for r in rs)[1]
    bp = 1.0 if len(c) >= r_len else math.exp(1 - r_len / len(c))
    assert abs(metrics.bleu_n([cand], [refs], 1) - bp * p1) < 1e-12
