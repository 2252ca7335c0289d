"""Caption generation over a pluggable conditional LM.

Beam search keeps the ``num_beams`` best candidates by cumulative
log-probability at every step (ties: lexicographically smaller token
sequence first). Candidates ending in EOS, or reaching ``max_new_tokens``,
leave the beam as finished hypotheses, which are finally ranked by
``cum_logprob / len(tokens) ** length_penalty``, where ``len`` counts
generated tokens including the EOS.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import metrics

LENGTH_PENALTY_FORMULA = "cum_logprob / len(tokens) ** length_penalty"


class LMContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    num_beams: int = 1
    no_repeat_ngram_size: int = 0
    length_penalty: float = 1.0
    max_new_tokens: int = 16
    eos_token: int = 0

    def __post_init__(self):
        if self.num_beams < 1:
            raise ValueError("num_beams must be >= 1")
        if self.no_repeat_ngram_size < 0:
            raise ValueError("no_repeat_ngram_size must be >= 0")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")


# name, num_beams, no_repeat_ngram_size, length_penalty
ABLATION_GRID = (
    ("Greedy", 1, 0, 1.0),
    ("Beam Only", 6, 0, 1.0),
    ("Beam + no_repeat", 6, 3, 1.0),
    ("Beam + length_penalty", 6, 0, 0.1),
    ("Full constraints", 6, 3, 0.1),
)
TABLE_COLUMNS = ("Method", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr", "CLIP-S", "RefCLIP-S")


def ablation_configs(max_new_tokens: int = 16, eos_token: int = 0) -> list[tuple[str, DecodeConfig]]:
    return [(name, DecodeConfig(nb, ng, lp, max_new_tokens, eos_token)) for name, nb, ng, lp in ABLATION_GRID]


class ConditionalLM(Protocol):
    vocab_size: int

    def next_logprobs(self, context: np.ndarray, prefix: Sequence[int]) -> np.ndarray: ...


@dataclass
class BeamHypothesis:
    tokens: tuple[int, ...]
    cum_logprob: float
    finished: bool = False
    norm_score: float = float("nan")


@dataclass
class BeamResult:
    hypotheses: list[BeamHypothesis]
    fallback_used: bool = False
    config: DecodeConfig | None = None
    meta: dict = field(default_factory=dict)

    @property
    def best(self) -> BeamHypothesis:
        return self.hypotheses[0]


def _log_softmax(x):
    m = np.max(x)
    return x - (m + np.log(np.sum(np.exp(x - m))))


class ToyConditionalLM:
    """Seeded stand-in for a frozen multimodal LM.

    next-token logits = context_summary @ W_ctx
                        + history_scale * (context_summary @ B[prev1] + H[prev2])
                        + steer_scale * mean(S[t] for t in prefix)
                        + unigram
    where ``context_summary`` is the mean of the injected context rows and
    prev1/prev2 are the last two prefix tokens (a BOS pad when missing).
    Tokens outside ``emit_ids`` get probability zero.
    """

    def __init__(self, vocab: Sequence[str], ctx_dim: int = 16, seed: int = 0, temperature: float = 1.0,
                 history_scale: float = 1.0, steer_scale: float = 1.0, eos_token: int = 0,
                 emit_ids: Sequence[int] | None = None):
        self.vocab = list(vocab)
        self.vocab_size = V = len(self.vocab)
        self.ctx_dim = ctx_dim
        self.temperature = temperature
        self.history_scale = history_scale
        self.steer_scale = steer_scale
        self.eos_token = eos_token
        rng = np.random.default_rng(seed)
        self.w_ctx = rng.normal(0.0, 1.0 / math.sqrt(ctx_dim), size=(ctx_dim, V))
        self.bilinear = rng.normal(0.0, 1.0 / math.sqrt(ctx_dim), size=(V + 1, ctx_dim, V))
        self.hist = rng.normal(0.0, 1.0, size=(V + 1, V))
        self.steer = rng.normal(0.0, 0.5, size=(V, V))
        self.unigram = rng.normal(0.0, 0.5, size=V)
        self.emit_mask = np.zeros(V, dtype=bool)
        self.emit_mask[list(range(V)) if emit_ids is None else list(emit_ids)] = True
        self.emit_mask[eos_token] = True
        self.token_to_id = {w: i for i, w in enumerate(self.vocab)}

    def logits(self, context: np.ndarray, prefix: Sequence[int]) -> np.ndarray:
        V = self.vocab_size
        summary = np.asarray(context, dtype=np.float64).reshape(-1, self.ctx_dim).mean(axis=0)
        prev1 = prefix[-1] if len(prefix) >= 1 else V
        prev2 = prefix[-2] if len(prefix) >= 2 else V
        out = summary @ self.w_ctx + self.unigram
        if self.history_scale:
            out = out + self.history_scale * (summary @ self.bilinear[prev1] + self.hist[prev2])
        if self.steer_scale and len(prefix):
            out = out + self.steer_scale * self.steer[np.asarray(prefix)].mean(axis=0)
        return out

    def next_logprobs(self, context: np.ndarray, prefix: Sequence[int]) -> np.ndarray:
        z = self.logits(context, prefix) / self.temperature
        z = np.where(self.emit_mask, z, -np.inf)
        return _log_softmax(z)

    def decode_text(self, tokens: Sequence[int]) -> str:
        return " ".join(self.vocab[t] for t in tokens if t != self.eos_token)


def project_tokens(z: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Per-row affine map of visual tokens into the LM context space."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != weight.shape[0]:
        raise ValueError(f"token dim {z.shape[-1]} does not match projector input {weight.shape[0]}")
    out = z @ weight
    return out if bias is None else out + bias


def _checked_logprobs(lm, context, prefix) -> np.ndarray:
    lp = np.asarray(lm.next_logprobs(context, prefix), dtype=np.float64)
    if lp.shape != (lm.vocab_size,):
        raise LMContractError(f"LM returned shape {lp.shape}, expected ({lm.vocab_size},)")
    finite = lp[np.isfinite(lp)]
    if finite.size == 0 or np.isnan(lp).any() or (lp > 1e-9).any():
        raise LMContractError("LM returned an invalid log-probability vector")
    m = finite.max()
    lse = m + math.log(np.exp(finite - m).sum())
    if abs(lse) > 1e-6:
        raise LMContractError(f"LM log-probabilities sum to exp({lse:.3g}), not 1")
    return lp


def banned_tokens(tokens: Sequence[int], n: int) -> set[int]:
    """Tokens whose emission would repeat an n-gram already in ``tokens``."""
    if n < 2 or len(tokens) < n - 1:
        return set()
    tokens = list(tokens)
    tail = tuple(tokens[len(tokens) - (n - 1):])
    banned = set()
    for i in range(len(tokens) - n + 1):
        if tuple(tokens[i:i + n - 1]) == tail:
            banned.add(tokens[i + n - 1])
    return banned


def greedy_decode(lm, context, prompt_tokens: Sequence[int], cfg: DecodeConfig) -> list[int]:
    """Argmax decoding (lowest id on ties); returns tokens without the EOS."""
    out: list[int] = []
    prompt = list(prompt_tokens)
    for _ in range(cfg.max_new_tokens):
        lp = _checked_logprobs(lm, context, prompt + out)
        banned = banned_tokens(out, cfg.no_repeat_ngram_size)
        if banned:
            lp = lp.copy()
            lp[list(banned)] = -np.inf
        if not np.isfinite(lp).any():
            break
        t = int(np.argmax(lp))
        if t == cfg.eos_token:
            break
        out.append(t)
    return out


def normalized_score(cum_logprob: float, length: int, length_penalty: float) -> float:
    return cum_logprob / (length ** length_penalty)


def beam_decode(lm, context, prompt_tokens: Sequence[int], cfg: DecodeConfig) -> BeamResult:
    prompt = list(prompt_tokens)
    eos = cfg.eos_token
    live = [BeamHypothesis((), 0.0)]
    finished: list[BeamHypothesis] = []
    fallback = False
    for step in range(cfg.max_new_tokens):
        cands: list[tuple[float, tuple[int, ...]]] = []
        for h in live:
            lp = _checked_logprobs(lm, context, prompt + list(h.tokens))
            banned = banned_tokens(h.tokens, cfg.no_repeat_ngram_size)
            allowed = [t for t in np.nonzero(np.isfinite(lp))[0].tolist() if t not in banned]
            if not allowed:
                fallback = True
                forced = lp[eos] if np.isfinite(lp[eos]) else -1e9
                cands.append((h.cum_logprob + float(forced), h.tokens + (eos,)))
                continue
            for t in allowed:
                cands.append((h.cum_logprob + float(lp[t]), h.tokens + (t,)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for cum, toks in cands[:cfg.num_beams]:
            if toks[-1] == eos or len(toks) >= cfg.max_new_tokens:
                finished.append(BeamHypothesis(toks, cum, True,
                                               normalized_score(cum, len(toks), cfg.length_penalty)))
            else:
                live.append(BeamHypothesis(toks, cum))
        if not live:
            break
    finished.sort(key=lambda h: (-h.norm_score, h.tokens))
    meta = {"length_penalty_formula": LENGTH_PENALTY_FORMULA, **asdict(cfg)}
    return BeamResult(finished, fallback, cfg, meta)


def strip_eos(tokens: Sequence[int], eos: int) -> list[int]:
    return [t for t in tokens if t != eos]


def decode(lm, context, prompt_tokens, cfg: DecodeConfig) -> tuple[list[int], float, bool]:
    """Top-1 output as (tokens without EOS, normalized score, fallback flag)."""
    res = beam_decode(lm, context, prompt_tokens, cfg)
    top = res.best
    return strip_eos(top.tokens, cfg.eos_token), top.norm_score, res.fallback_used


def run_ablation_grid(lm, contexts: Sequence[np.ndarray], prompts, refs: Sequence[Sequence[str]],
                      max_new_tokens: int = 16, eos_token: int = 0, sample_ids=None):
    """Decode every sample under the five ablation configs and score them.

    ``prompts`` is one token list for all samples or one per sample. Returns
    ``(rows, generations)``; rows carry the metric table columns; the CLIP-based
    columns are ``None`` since they need a pretrained encoder.
    """
    if not contexts:
        raise ValueError("need at least one sample")
    if prompts and isinstance(prompts[0], (int, np.integer)):
        prompts = [list(prompts)] * len(contexts)
    sample_ids = list(range(len(contexts))) if sample_ids is None else list(sample_ids)
    rows, generations = [], []
    for name, cfg in ablation_configs(max_new_tokens, eos_token):
        texts = []
        for sid, ctx, prompt in zip(sample_ids, contexts, prompts):
            toks, score, fb = decode(lm, ctx, prompt, cfg)
            text = lm.decode_text(toks)
            texts.append(text)
            generations.append({"sample_id": sid, "config_name": name, "tokens": toks, "text": text,
                                "norm_score": score, "fallback_used": fb})
        ev = metrics.evaluate_corpus(texts, refs)
        rows.append(dict(zip(TABLE_COLUMNS, (name, *ev.bleu, ev.rouge_l, ev.cider, None, None)))
                    | {"num_beams": cfg.num_beams, "no_repeat_ngram_size": cfg.no_repeat_ngram_size,
                       "length_penalty": cfg.length_penalty})
    return rows, generations
