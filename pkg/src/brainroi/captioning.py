"""Synthetic captioning task wired around the encoder.

Reference captions for a sample are what the toy LM says about the sample's
*true* image tokens under a fixed reference prompt; candidates are what it
says about the encoder's tokens under the prompt being evaluated. Better
alignment and better prompts therefore both raise the metrics.
"""
from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import decoding, encoder as enc, metrics
from .ipo import PLACEHOLDER, SEED_PROMPTS, _SUBSTITUTIONS, _SUFFIXES, ScoringError
from .training import SyntheticDataset

EOS, UNK = "<eos>", "<unk>"
CAPTION_WORDS = (
    "a", "the", "man", "woman", "dog", "cat", "bus", "train", "plate", "pizza", "on", "in", "with",
    "street", "table", "field", "sitting", "standing", "riding", "red", "white", "large", "small", "two",
)
REFERENCE_PROMPT = f"Write a short caption for {PLACEHOLDER}."
_STRIP = str.maketrans("", "", string.punctuation)


def _prompt_words() -> list[str]:
    texts = list(SEED_PROMPTS) + [REFERENCE_PROMPT] + [new for _, new in _SUBSTITUTIONS] + list(_SUFFIXES)
    words = []
    for t in texts:
        for w in t.replace(PLACEHOLDER, " ").lower().translate(_STRIP).split():
            if w not in words:
                words.append(w)
    return words


def build_vocab() -> list[str]:
    vocab = [EOS, UNK, PLACEHOLDER, *CAPTION_WORDS]
    vocab += [w for w in _prompt_words() if w not in vocab]
    return vocab


class PromptTokenizer:
    def __init__(self, vocab: Sequence[str]):
        self.ids = {w: i for i, w in enumerate(vocab)}

    def __call__(self, text: str) -> list[int]:
        out = []
        for piece in text.replace(PLACEHOLDER, f" {PLACEHOLDER} ").split():
            if piece == PLACEHOLDER:
                out.append(self.ids[PLACEHOLDER])
                continue
            for w in piece.lower().translate(_STRIP).split():
                out.append(self.ids.get(w, self.ids[UNK]))
        return out


@dataclass
class CaptionSample:
    sample_id: str
    batch: enc.SubjectBatch  # single sample
    target: np.ndarray  # (L, D_out) true image tokens
    refs: list[str] = field(default_factory=list)


@dataclass
class CaptionWorld:
    lm: decoding.ToyConditionalLM
    tokenizer: PromptTokenizer
    proj_w: np.ndarray
    proj_b: np.ndarray
    max_new_tokens: int = 12

    def context(self, tokens: np.ndarray) -> np.ndarray:
        return decoding.project_tokens(tokens, self.proj_w, self.proj_b)

    def caption(self, tokens: np.ndarray, prompt: str, cfg: decoding.DecodeConfig) -> tuple[str, list[int], float, bool]:
        toks, score, fb = decoding.decode(self.lm, self.context(tokens), self.tokenizer(prompt), cfg)
        return self.lm.decode_text(toks), toks, score, fb

    def reference_captions(self, target: np.ndarray) -> list[str]:
        refs = []
        for _, cfg in (decoding.ablation_configs(self.max_new_tokens)[0], decoding.ablation_configs(self.max_new_tokens)[-1]):
            text = self.caption(target, REFERENCE_PROMPT, cfg)[0]
            if text not in refs:
                refs.append(text)
        return refs


def build_world(D_out: int, ctx_dim: int = 16, seed: int = 0, temperature: float = 1.0,
                max_new_tokens: int = 12) -> CaptionWorld:
    vocab = build_vocab()
    emit = [vocab.index(w) for w in CAPTION_WORDS]
    lm = decoding.ToyConditionalLM(vocab, ctx_dim=ctx_dim, seed=seed, temperature=temperature,
                                   eos_token=0, emit_ids=emit)
    rng = np.random.default_rng([seed, 1])
    proj_w = rng.normal(0.0, 3.0 / np.sqrt(D_out), size=(D_out, ctx_dim))
    proj_b = np.zeros(ctx_dim)
    return CaptionWorld(lm, PromptTokenizer(vocab), proj_w, proj_b, max_new_tokens)


def caption_samples(dataset: SyntheticDataset, world: CaptionWorld, subjects: Sequence[int] | None = None,
                    per_subject: int | None = None) -> list[CaptionSample]:
    """Validation samples with reference captions, in subject then sample order."""
    out = []
    for s in (range(len(dataset.subjects)) if subjects is None else subjects):
        subj = dataset.subjects[s]
        idx = subj.val_idx if per_subject is None else subj.val_idx[:per_subject]
        for j in idx:
            target = subj.targets[j]
            out.append(CaptionSample(f"{subj.name}-{int(j)}", subj.batch(int(j)), target,
                                     world.reference_captions(target)))
    return out


def score_prompt(prompt: str, val_set: Sequence[CaptionSample], params, config: enc.EncoderConfig,
                 world: CaptionWorld, decode_cfg: decoding.DecodeConfig) -> float:
    """Corpus BLEU-4 of captions decoded with ``prompt`` on ``val_set``."""
    if not val_set:
        raise ScoringError("empty validation set")
    cands, refs = [], []
    for sample in val_set:
        try:
            z = enc.encode(sample.batch, params, config)
            cands.append(world.caption(z, prompt, decode_cfg)[0])
        except Exception as exc:
            raise ScoringError(f"decoding failed on sample {sample.sample_id}: {exc}") from exc
        refs.append(sample.refs)
    return metrics.bleu_n(cands, refs, 4)
