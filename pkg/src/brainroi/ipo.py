"""Closed-loop prompt optimization with an auditable trace.

Each iteration asks a generator for new human-readable prompts, scores every
prompt not seen before (scores are cached by exact text), and keeps the
top-N of the old pool plus the new candidates. Ranking: higher score, then
earlier ``iter_added``, then lexicographic text.
"""
from __future__ import annotations

import json
import logging
import random
import socket
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

log = logging.getLogger(__name__)

PLACEHOLDER = "<image>"
DEFAULT_INSTRUCTION = (
    "You rewrite image-captioning prompts. Given the current prompts, write new prompts that keep the "
    "same goal (a short caption of the image) but vary the wording. Every prompt must contain the "
    f"marker {PLACEHOLDER} exactly once. Reply with JSON: {{\"prompts\": [...]}}."
)

SEED_PROMPTS = (
    f"Describe this image {PLACEHOLDER} as simply as possible.",
    f"What is the content of the image {PLACEHOLDER}? Please answer in short sentences.",
    f"Summarize the content of the photo {PLACEHOLDER}.",
    f"What elements are present in the scene depicted by {PLACEHOLDER}?",
    f"Identify and describe the main action taking place in {PLACEHOLDER}.",
)


class ProtocolError(RuntimeError):
    """Generator replied, but not with what the contract requires."""


class TransportError(RuntimeError):
    """Generator could not be reached or timed out."""


class ScoringError(RuntimeError):
    pass


def check_prompt(text: str) -> None:
    if not text or not text.strip():
        raise ProtocolError("empty prompt")
    if text.count(PLACEHOLDER) != 1:
        raise ProtocolError(f"prompt must contain {PLACEHOLDER} exactly once: {text!r}")


@dataclass
class PromptCandidate:
    text: str
    iter_added: int = 0
    score: float | None = None

    def __post_init__(self):
        check_prompt(self.text)


@dataclass
class GeneratorConfig:
    temperature: float = 0.8
    top_p: float = 0.95
    max_new_tokens: int = 1024
    candidates_per_iter: int = 6
    iterations: int = 3

    def __post_init__(self):
        if self.candidates_per_iter < 1 or self.iterations < 1:
            raise ValueError("candidates_per_iter and iterations must be >= 1")


class PromptGenerator(Protocol):
    def generate(self, pool: Sequence[str], k: int, cfg: GeneratorConfig) -> list[str]: ...


def _rank_key(c: PromptCandidate):
    return (-c.score, c.iter_added, c.text)


@dataclass
class PromptPool:
    capacity: int
    members: list[PromptCandidate] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("pool capacity must be >= 1")

    def select(self, candidates: Sequence[PromptCandidate]) -> None:
        merged = {c.text: c for c in self.members}
        for c in candidates:
            merged.setdefault(c.text, c)
        self.members = sorted(merged.values(), key=_rank_key)[:self.capacity]

    @property
    def best(self) -> PromptCandidate:
        return self.members[0]

    def texts(self) -> list[str]:
        return [c.text for c in self.members]


@dataclass
class IPOTrace:
    records: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    def append(self, cand: PromptCandidate, iteration: int) -> None:
        self.records.append({"prompt": cand.text, "iter_added": cand.iter_added, "score": cand.score,
                             "iteration_evaluated": iteration})

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=False) + "\n" for r in self.records)

    def best_per_iteration(self) -> list[float]:
        out, best = [], float("-inf")
        last = max((r["iteration_evaluated"] for r in self.records), default=-1)
        for i in range(last + 1):
            scores = [r["score"] for r in self.records if r["iteration_evaluated"] == i]
            best = max([best, *scores])
            out.append(best)
        return out


@dataclass
class IPOResult:
    best: PromptCandidate
    trace: IPOTrace
    pool: PromptPool
    meta: dict


def ipo_loop(seeds: Sequence[str], generator: PromptGenerator, scorer: Callable[[str], float],
             gen_cfg: GeneratorConfig, pool_capacity: int = 5) -> IPOResult:
    if not seeds:
        raise ValueError("need at least one seed prompt")
    trace = IPOTrace()
    cache: dict[str, float] = {}
    pool = PromptPool(pool_capacity)

    def score_new(texts, iteration):
        fresh = []
        for text in texts:
            if text in cache:
                trace.events.append({"iteration": iteration, "event": "duplicate", "prompt": text})
                continue
            cand = PromptCandidate(text, iteration)
            cand.score = cache[text] = float(scorer(text))
            trace.append(cand, iteration)
            fresh.append(cand)
        return fresh

    pool.select(score_new(list(seeds), 0))
    for it in range(1, gen_cfg.iterations + 1):
        try:
            texts = generator.generate(pool.texts(), gen_cfg.candidates_per_iter, gen_cfg)
            if len(texts) != gen_cfg.candidates_per_iter:
                raise ProtocolError(f"generator returned {len(texts)} prompts, expected {gen_cfg.candidates_per_iter}")
            for t in texts:
                check_prompt(t)
        except (ProtocolError, TransportError) as exc:
            log.warning("iteration %d skipped: %s", it, exc)
            trace.events.append({"iteration": it, "event": "skipped", "error": f"{type(exc).__name__}: {exc}"})
            continue
        pool.select(score_new(texts, it))
        trace.events.append({"iteration": it, "event": "pool", "pool": pool.texts(),
                             "best_score": pool.best.score})

    meta = {"pool_capacity": pool_capacity, "seeds": len(seeds), **asdict(gen_cfg),
            "ranking_metric": "BLEU-4", "tie_break": "score desc, iter_added asc, text asc"}
    return IPOResult(pool.best, trace, pool, meta)


# -- generators ------------------------------------------------------------------

_SUBSTITUTIONS = (
    ("Describe", "Summarize"), ("Describe", "Outline"), ("Summarize", "Describe"),
    ("image", "photo"), ("photo", "picture"), ("picture", "image"),
    ("content", "main subject"), ("main", "central"), ("elements", "objects"),
    ("scene", "setting"), ("simply", "briefly"), ("Identify and describe", "Identify and explain"),
    ("What is", "Tell me"), ("depicted", "shown"), ("action", "activity"),
)
_SUFFIXES = (" Please answer in short sentences.", " Keep it to one sentence.", " Use plain words.",
             " Mention the key objects.")


def _mutations(text: str) -> list[str]:
    out = []
    for old, new in _SUBSTITUTIONS:
        if old in text and old not in PLACEHOLDER:
            out.append(text.replace(old, new, 1))
    for suffix in _SUFFIXES:
        if not text.endswith(suffix):
            out.append(text.rstrip() + suffix)
    return [t for t in out if t.count(PLACEHOLDER) == 1 and t != text]


def mock_generate(pool: Sequence[str], k: int, seed: int = 0) -> list[str]:
    """Deterministic paraphrases of pool members via a fixed substitution table."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = random.Random(seed)
    seen = set(pool)
    options = []
    for text in pool:
        options.extend(_mutations(text))
    rng.shuffle(options)
    out = []
    for t in options:
        if t not in seen:
            seen.add(t)
            out.append(t)
        if len(out) == k:
            return out
    base = pool[0] if pool else f"Describe {PLACEHOLDER}."
    n = 1
    while len(out) < k:
        t = f"{base} (variant {n})"
        if t not in seen:
            seen.add(t)
            out.append(t)
        n += 1
    return out


class MockGenerator:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.calls = 0

    def generate(self, pool, k, cfg=None):
        self.calls += 1
        return mock_generate(pool, k, seed=self.seed * 1000 + self.calls)


def http_generate(endpoint: str, pool: Sequence[str], k: int, gen_cfg: GeneratorConfig,
                  instruction: str = DEFAULT_INSTRUCTION, timeout: float = 30.0) -> list[str]:
    body = json.dumps({"instruction": instruction, "pool": list(pool), "k": k,
                       "temperature": gen_cfg.temperature, "top_p": gen_cfg.top_p,
                       "max_new_tokens": gen_cfg.max_new_tokens}).encode("utf-8")
    req = urllib.request.Request(endpoint, data=body, method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            raw = resp.read()
    except urllib.error.HTTPError as exc:
        raise TransportError(f"{endpoint}: HTTP {exc.code}") from None
    except (urllib.error.URLError, socket.timeout, TimeoutError, ConnectionError, OSError) as exc:
        reason = getattr(exc, "reason", exc)
        raise TransportError(f"{endpoint}: {reason}") from None
    try:
        prompts = json.loads(raw.decode("utf-8"))["prompts"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ProtocolError(f"{endpoint}: malformed response ({exc})") from None
    if not isinstance(prompts, list) or not all(isinstance(p, str) for p in prompts):
        raise ProtocolError(f"{endpoint}: 'prompts' must be a list of strings")
    if len(prompts) != k:
        raise ProtocolError(f"{endpoint}: returned {len(prompts)} prompts, expected {k}")
    for p in prompts:
        check_prompt(p)
    return prompts


class HTTPGenerator:
    def __init__(self, endpoint: str, instruction: str = DEFAULT_INSTRUCTION, timeout: float = 30.0):
        self.endpoint = endpoint
        self.instruction = instruction
        self.timeout = timeout

    def generate(self, pool, k, cfg):
        return http_generate(self.endpoint, pool, k, cfg, self.instruction, self.timeout)
