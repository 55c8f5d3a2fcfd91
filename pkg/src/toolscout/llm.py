"""Language-model gateway: prompt templates, chat providers, scripted
transcripts, and an n-gram likelihood scorer.

Templates live as text assets under ``templates/``; their wording is
configuration, not a contract — only the placeholder names and the five
template ids are fixed. All provider interaction funnels through
:func:`complete`, so scripted replays and live runs share one code path.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol

import httpx

from .errors import ProviderError, TemplateError, TranscriptMissError
from .text_analysis import tokenize

logger = logging.getLogger(__name__)

TEMPLATE_IDS = (
    "planner",
    "predictor",
    "entity_filter",
    "functionality_assessment",
    "edit_ground",
)

# Placeholders that may be omitted by callers; filled with these values.
_TEMPLATE_DEFAULTS: dict[str, dict[str, str]] = {
    "planner": {"mode": "propose", "batch_size": "4"},
}

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")

UNSCRIPTED_RESPONSE = "UNSCRIPTED"

# Canonical variables-key: template id and sorted (name, value) pairs,
# all joined with the unit separator. Documented so transcripts recorded
# by one process replay in another.
_UNIT_SEP = "\x1f"


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.0
    max_tokens: int = 512
    seed: int | None = None


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    defaults: dict[str, str] = field(default_factory=dict)

    @property
    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER_RE.findall(self.body))

    @property
    def required_vars(self) -> set[str]:
        return self.placeholders - set(self.defaults)

    def render(self, variables: dict[str, str]) -> str:
        """Single-pass substitution; values are inserted literally and
        never re-expanded, so braces inside values are safe."""
        merged = {**self.defaults, **variables}
        missing = sorted(self.required_vars - set(merged))
        if missing:
            raise TemplateError(
                f"template {self.template_id!r}: missing variable {missing[0]!r}"
            )
        return _PLACEHOLDER_RE.sub(lambda m: merged[m.group(1)], self.body)


def _load_body(template_id: str) -> str:
    return (
        resources.files("toolscout")
        .joinpath(f"templates/{template_id}.txt")
        .read_text(encoding="utf-8")
    )


_TEMPLATES: dict[str, PromptTemplate] = {}


def get_template(template_id: str) -> PromptTemplate:
    if template_id not in TEMPLATE_IDS:
        raise TemplateError(f"unknown template id {template_id!r}")
    if template_id not in _TEMPLATES:
        _TEMPLATES[template_id] = PromptTemplate(
            template_id=template_id,
            body=_load_body(template_id),
            defaults=_TEMPLATE_DEFAULTS.get(template_id, {}),
        )
    return _TEMPLATES[template_id]


def render(template_id: str, variables: dict[str, str]) -> str:
    return get_template(template_id).render(variables)


def canonical_key(template_id: str, variables: dict[str, str]) -> str:
    parts = [template_id]
    for name in sorted(variables):
        parts.extend((name, variables[name]))
    return _UNIT_SEP.join(parts)


class LlmProvider(Protocol):
    """Chat-completion contract.

    ``variables`` is passed alongside the rendered prompt so scripted
    providers can key on the canonical serialization instead of on prompt
    wording (templates may be re-worded without invalidating transcripts).
    """

    def complete(
        self,
        template_id: str,
        prompt: str,
        params: DecodeParams,
        variables: dict[str, str],
    ) -> str: ...


def complete(
    provider: LlmProvider,
    template_id: str,
    variables: dict[str, str],
    params: DecodeParams = DecodeParams(),
) -> str:
    """Render the template and get a completion from the provider."""
    prompt = render(template_id, variables)
    return provider.complete(template_id, prompt, params, variables)


@dataclass
class ScriptedTranscript:
    """Canned responses keyed by canonical variables-key.

    In strict mode a missing key raises; otherwise the documented
    fallback text ``UNSCRIPTED`` is returned.
    """

    entries: dict[str, str] = field(default_factory=dict)
    strict: bool = True

    def add(self, template_id: str, variables: dict[str, str], response: str) -> None:
        key = canonical_key(template_id, variables)
        existing = self.entries.get(key)
        if existing is not None and existing != response:
            raise ProviderError(f"conflicting transcript entries for key {key!r}")
        self.entries[key] = response

    def lookup(self, template_id: str, key: str) -> str:
        try:
            return self.entries[key]
        except KeyError:
            if self.strict:
                raise TranscriptMissError(
                    f"template {template_id!r}: no scripted response for key {key!r}"
                ) from None
            return UNSCRIPTED_RESPONSE


def load_transcript(path: str | Path, strict: bool = True) -> ScriptedTranscript:
    entries: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            key = row["key"]
            if key in entries:
                raise ProviderError(f"{path}: line {lineno}: duplicate key")
            entries[key] = row["response"]
    return ScriptedTranscript(entries=entries, strict=strict)


def save_transcript(transcript: ScriptedTranscript, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(transcript.entries):
            template_id = key.split(_UNIT_SEP, 1)[0]
            row = {"template_id": template_id, "key": key, "response": transcript.entries[key]}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


class ScriptedProvider:
    """Deterministic provider backed by a transcript; a pure function of
    (template id, canonical serialization of variables)."""

    def __init__(self, transcript: ScriptedTranscript):
        self.transcript = transcript

    def complete(self, template_id, prompt, params, variables) -> str:
        del prompt, params
        return self.transcript.lookup(template_id, canonical_key(template_id, variables))


class RecordingProvider:
    """Answer via a policy callback and record every exchange.

    Used to build transcripts: run the real pipeline once with a policy
    that produces the intended responses, then save ``transcript``.
    """

    def __init__(self, policy):
        self.policy = policy
        self.transcript = ScriptedTranscript()

    def complete(self, template_id, prompt, params, variables) -> str:
        del prompt, params
        response = self.policy(template_id, variables)
        self.transcript.add(template_id, variables, response)
        return response


class RemoteChatProvider:
    """HTTP chat-completion client with retry and timeout.

    Wire format: POST ``{"model", "messages", "temperature", "max_tokens"}``,
    response ``{"text": ...}``. Endpoint and model come from configuration;
    the bearer token only from the environment. ``max_in_flight`` bounds
    concurrent requests; calls share no mutable state.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        token_env: str = "TOOLSCOUT_LLM_TOKEN",
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 4,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self._token = os.environ.get(token_env, "")
        self._max_attempts = max_attempts
        self._backoff = backoff
        self._gate = threading.Semaphore(max_in_flight)
        self._client = client or httpx.Client(timeout=timeout)

    def complete(self, template_id, prompt, params, variables) -> str:
        del variables
        headers = {}
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        last_error: Exception | None = None
        for attempt in range(self._max_attempts):
            if attempt:
                time.sleep(self._backoff * 2 ** (attempt - 1))
            try:
                with self._gate:
                    response = self._client.post(self.endpoint, json=payload, headers=headers)
                response.raise_for_status()
                return str(response.json()["text"])
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last_error = exc
        raise ProviderError(
            f"chat completion for template {template_id!r} failed "
            f"after {self._max_attempts} attempts: {last_error}"
        )


# --- n-gram likelihood scoring ---------------------------------------------

_BOS = "<s>"


@dataclass(frozen=True)
class NGramLm:
    """Add-one smoothed n-gram model over the package tokenizer.

    Conditionals are normalized over the training vocabulary; tokens
    outside it score with a zero count (the usual add-one shortcut).
    """

    order: int
    counts: dict[tuple[str, ...], Counter]
    context_totals: dict[tuple[str, ...], int]
    vocabulary: frozenset[str]

    def prob(self, token: str, context: tuple[str, ...]) -> float:
        v = len(self.vocabulary)
        if v == 0:
            return 1.0
        hits = self.counts.get(context)
        count = hits[token] if hits else 0
        return (count + 1) / (self.context_totals.get(context, 0) + v)

    def neg_logprob(self, text: str) -> float:
        return sequence_neg_logprob(self, text)


def train_ngram(corpus: list[str], order: int = 2) -> NGramLm:
    if order < 1:
        raise ValueError("order must be at least 1")
    counts: dict[tuple[str, ...], Counter] = {}
    totals: dict[tuple[str, ...], int] = {}
    vocabulary: set[str] = set()
    for text in corpus:
        tokens = tokenize(text)
        vocabulary.update(tokens)
        context = (_BOS,) * (order - 1)
        for token in tokens:
            counts.setdefault(context, Counter())[token] += 1
            totals[context] = totals.get(context, 0) + 1
            if order > 1:
                context = context[1:] + (token,)
    return NGramLm(
        order=order,
        counts=counts,
        context_totals=totals,
        vocabulary=frozenset(vocabulary),
    )


def sequence_neg_logprob(lm: NGramLm, text: str) -> float:
    """Sum of -ln p(token | context); 0.0 for text with no tokens."""
    total = 0.0
    context = (_BOS,) * (lm.order - 1)
    for token in tokenize(text):
        total -= math.log(lm.prob(token, context))
        if lm.order > 1:
            context = context[1:] + (token,)
    return total
