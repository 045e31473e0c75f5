"""Decompose a free-form action description into ordered sub-action strings.

The primary path asks a chat-completion LLM for a numbered list of
sub-actions, then stabilizes the answer by also decomposing a few LLM
paraphrases of the description and majority-voting over the canonicalized
candidate decompositions (ties prefer the decomposition of the original,
non-paraphrased text). A marker-based splitter provides an offline
fallback and ablation baseline, and a file cache replays previous answers
without touching the client.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import string
import time
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import requests

from .errors import ConfigError, DecompositionParseError, InvalidInputError, LspUnavailableError

log = logging.getLogger(__name__)

# Bump when the decomposition prompt changes; part of every cache key.
PROMPT_VERSION = "1"

ENV_API_KEY = "ZOMG_LLM_API_KEY"
ENV_BASE_URL = "ZOMG_LLM_BASE_URL"
ENV_MODEL = "ZOMG_LLM_MODEL"

_DECOMPOSE_TEMPERATURE = 0.0
_PARAPHRASE_TEMPERATURE = 0.7


class LlmClient(Protocol):
    def complete(self, prompt: str, temperature: float = 0.0) -> str: ...


@dataclass(frozen=True)
class LspConfig:
    # n_paraphrases + 1 decompositions enter the vote
    n_paraphrases: int = 2
    max_retries: int = 2
    timeout_seconds: float = 30.0
    cache_dir: Optional[str] = None

    def __post_init__(self):
        if self.n_paraphrases < 0:
            raise ConfigError(f"n_paraphrases must be >= 0, got {self.n_paraphrases}")
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {self.max_retries}")


@dataclass(frozen=True)
class DecompositionResult:
    sub_actions: list[str]
    k: int
    votes: dict[str, int]
    source: str  # "llm_voted" | "rule_based" | "cached"


def build_decomposition_prompt(text: str) -> str:
    """Prompt demanding a machine-parseable numbered list of sub-actions."""
    if not text or not text.strip():
        raise InvalidInputError("cannot build a decomposition prompt for empty text")
    return (
        "You split descriptions of human motion into sub-actions.\n"
        "Rules:\n"
        "- semantic completeness: every sub-action must be a coherent motion on its own\n"
        "- temporal order: list sub-actions in the order they happen\n"
        "- output ONLY a numbered list, one sub-action per line, formatted exactly "
        "like \"1. ...\" then \"2. ...\"; no extra words before or after\n"
        "\n"
        "Example:\n"
        "Description: a person walks to the chair and sits down while waving\n"
        "1. walks to the chair\n"
        "2. sits down\n"
        "3. waves\n"
        "\n"
        "Example:\n"
        "Description: someone jumps twice, then turns around\n"
        "1. jumps twice\n"
        "2. turns around\n"
        "\n"
        f"Description: {text.strip()}\n"
    )


def build_paraphrase_prompt(text: str) -> str:
    if not text or not text.strip():
        raise InvalidInputError("cannot build a paraphrase prompt for empty text")
    return (
        "Rewrite the following motion description in different words, keeping the "
        "same actions in the same order. Output only the rewritten sentence.\n"
        f"Description: {text.strip()}\n"
    )


_ITEM_LINE = re.compile(r"^\s*\d+\s*[.)]\s*(.+?)\s*$")
_ITEM_INLINE = re.compile(r"\d+\s*[.)]\s*")


def parse_decomposition(reply: str) -> list[str]:
    """Extract numbered-list items, in order of appearance.

    Tolerates prose around the list and inline "1) foo 2) bar" formatting.
    """
    items: list[str] = []
    for line in reply.splitlines():
        m = _ITEM_LINE.match(line)
        if m:
            items.append(m.group(1))
    if not items:
        # inline fallback: split on the numbering tokens themselves
        parts = _ITEM_INLINE.split(reply)
        if len(parts) > 1:
            items = parts[1:]
    items = [it.strip().strip(string.punctuation + " \t") for it in items]
    items = [it for it in items if it]
    if not items:
        raise DecompositionParseError(f"no numbered list found in reply: {reply!r}")
    return items


def canonical_form(sub_actions: Sequence[str]) -> str:
    """Lowercased, punctuation-free, '|'-joined key used for vote tallies."""
    cleaned = []
    for item in sub_actions:
        lowered = item.lower()
        lowered = "".join(c for c in lowered if c not in string.punctuation)
        cleaned.append(" ".join(lowered.split()))
    return "|".join(cleaned)


_MARKERS = re.compile(r", then | and then | then | while | and |, ")


def rule_based_split(text: str) -> list[str]:
    """Split on ordered connective markers; the whole text if none fires."""
    if not text or not text.strip():
        raise InvalidInputError("cannot split empty text")
    parts = [p.strip() for p in _MARKERS.split(text)]
    parts = [p for p in parts if p]
    return parts if parts else [text.strip()]


class MockClient:
    """Serves a fixed reply table cyclically and counts calls."""

    def __init__(self, replies: Sequence[str]):
        if not replies:
            raise ConfigError("MockClient needs at least one reply")
        self.replies = list(replies)
        self.calls = 0

    def complete(self, prompt: str, temperature: float = 0.0) -> str:
        reply = self.replies[self.calls % len(self.replies)]
        self.calls += 1
        return reply


class HttpChatClient:
    """OpenAI-compatible chat-completions client."""

    def __init__(self, api_key: str, base_url: str, model: str,
                 timeout_seconds: float = 30.0, max_retries: int = 2):
        if not base_url:
            raise ConfigError("HttpChatClient needs a base URL")
        self.api_key = api_key
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.timeout_seconds = timeout_seconds
        self.max_retries = max_retries

    @classmethod
    def from_env(cls, timeout_seconds: float = 30.0, max_retries: int = 2) -> "HttpChatClient":
        base_url = os.environ.get(ENV_BASE_URL, "")
        if not base_url:
            raise ConfigError(f"{ENV_BASE_URL} is not set")
        return cls(
            api_key=os.environ.get(ENV_API_KEY, ""),
            base_url=base_url,
            model=os.environ.get(ENV_MODEL, ""),
            timeout_seconds=timeout_seconds,
            max_retries=max_retries,
        )

    def complete(self, prompt: str, temperature: float = 0.0) -> str:
        url = f"{self.base_url}/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        }
        last_exc: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = requests.post(url, headers=headers, json=payload,
                                     timeout=self.timeout_seconds)
                resp.raise_for_status()
                data = resp.json()
                return data["choices"][0]["message"]["content"]
            except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
                last_exc = exc
                if attempt < self.max_retries:
                    time.sleep(min(2.0 ** attempt, 8.0))
        raise LspUnavailableError(f"chat completion failed after "
                                  f"{self.max_retries + 1} attempts: {last_exc}")


def cache_key(text: str) -> str:
    digest = hashlib.sha256(f"{PROMPT_VERSION}\x00{text}".encode("utf-8"))
    return digest.hexdigest()


def cache_get(cache_dir: str, text: str) -> Optional[DecompositionResult]:
    path = os.path.join(cache_dir, cache_key(text) + ".json")
    if not os.path.exists(path):
        return None
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        sub_actions = [str(s) for s in obj["sub_actions"]]
        if not sub_actions or any(not s for s in sub_actions):
            raise ValueError("empty sub-actions")
        votes = {str(c): int(n) for c, n in obj["votes"].items()}
    except (OSError, ValueError, KeyError, TypeError) as exc:
        log.warning("ignoring corrupt cache entry %s: %s", path, exc)
        return None
    return DecompositionResult(sub_actions, len(sub_actions), votes, source="cached")


def cache_put(cache_dir: str, text: str, result: DecompositionResult) -> None:
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, cache_key(text) + ".json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"sub_actions": result.sub_actions, "votes": result.votes,
                   "source": result.source}, fh, sort_keys=True)
        fh.write("\n")


def _decompose_once(client: LlmClient, text: str) -> list[str]:
    reply = client.complete(build_decomposition_prompt(text), _DECOMPOSE_TEMPERATURE)
    return parse_decomposition(reply)


def decompose_with_voting(client: LlmClient, text: str, cfg: LspConfig) -> DecompositionResult:
    """Decompose `text` with paraphrase ballots and majority voting.

    Ballot 0 decomposes the original text; each further ballot decomposes
    one LLM paraphrase. Candidates are tallied by canonical form; the top
    tally wins, with ties preferring the original text's decomposition and
    then the earliest ballot. Individual ballot failures are tolerated as
    long as at least one succeeds.
    """
    if not text or not text.strip():
        raise InvalidInputError("cannot decompose empty text")
    if cfg.cache_dir:
        hit = cache_get(cfg.cache_dir, text)
        if hit is not None:
            return hit

    ballots: list[list[str]] = []
    failures: list[Exception] = []
    original_canonical: Optional[str] = None
    try:
        first = _decompose_once(client, text)
        ballots.append(first)
        original_canonical = canonical_form(first)
    except (LspUnavailableError, DecompositionParseError) as exc:
        failures.append(exc)
    for _ in range(cfg.n_paraphrases):
        try:
            paraphrase = client.complete(build_paraphrase_prompt(text), _PARAPHRASE_TEMPERATURE)
            if not paraphrase.strip():
                raise DecompositionParseError("empty paraphrase reply")
            ballots.append(_decompose_once(client, paraphrase))
        except (LspUnavailableError, DecompositionParseError) as exc:
            failures.append(exc)

    if not ballots:
        raise LspUnavailableError(
            f"all {cfg.n_paraphrases + 1} decomposition attempts failed: {failures}"
        )

    votes = Counter(canonical_form(b) for b in ballots)
    top = max(votes.values())
    leaders = [c for c, n in votes.items() if n == top]
    if original_canonical in leaders:
        winner_canonical = original_canonical
    else:
        # earliest ballot among the tied leaders
        winner_canonical = next(c for c in (canonical_form(b) for b in ballots)
                                if c in leaders)
    winning = next(b for b in ballots if canonical_form(b) == winner_canonical)

    result = DecompositionResult(list(winning), len(winning), dict(votes), source="llm_voted")
    if cfg.cache_dir:
        cache_put(cfg.cache_dir, text, result)
    return result


def rule_based_result(text: str) -> DecompositionResult:
    """Wrap the marker-based fallback in the same result shape."""
    items = rule_based_split(text)
    return DecompositionResult(items, len(items), {canonical_form(items): 1},
                               source="rule_based")
