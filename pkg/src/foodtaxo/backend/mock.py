"""Scripted, seeded mock backend.

The mock reads the prompt it receives to work out which stage is being
asked, which recovery mode the engine is in, the candidate list and the
upstream context. Responses come from, in order of precedence:

1. an explicit rule keyed by (stage, attempt index);
2. seeded noise: malformed output, an off-taxonomy label or a near-miss
   spelling of the correct label;
3. the clean answer: the scripted ground truth if it is among the
   candidates, otherwise the first candidate.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import time
from dataclasses import dataclass, field

import yaml

from ..errors import BackendRefusal, FormatError, TransportError
from ..ontology import StageId
from ..prompts import (
    CANDIDATES_PREFIX,
    CONSTRAINED_CHOICE_MARKER,
    MIXED_MARKER,
    ONE_SHOT_HEADER,
    STRICT_FORMAT_MARKER,
)
from .base import BackendRequest, BackendResponse

ONE_SHOT = "oneshot"
STAGE_TOKENS = ("category", "subcategory", "cooking_style", ONE_SHOT)

DEFAULT_FOREIGN_LABELS = (
    "Sushi",
    "Ramen",
    "Tacos",
    "Falafel",
    "Kimchi Jjigae",
    "Bibimbap",
    "Churros",
    "Pho",
    "Smoked",
    "Sous Vide",
    "Raw Marinated",
    "Street Food",
)

_CONTEXT_RE = re.compile(r'(category|subcategory) = "([^"]*)"')
_MAX_ITEMS_RE = re.compile(r"at most (\d+) objects")


def _stage_token(value) -> str:
    text = str(value).strip().lower().replace("-", "")
    if text in (ONE_SHOT, "one_shot"):
        return ONE_SHOT
    return StageId.parse(value).key


@dataclass(frozen=True)
class NoiseConfig:
    p_malformed: float = 0.0
    p_offtaxonomy: float = 0.0
    p_nearmiss: float = 0.0

    def __post_init__(self):
        for name in ("p_malformed", "p_offtaxonomy", "p_nearmiss"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


@dataclass
class MockScript:
    """Declarative behaviour for :class:`MockBackend`.

    ``rules`` keys are ``(stage, attempt)`` where stage is a stage key
    (``category``, ``subcategory``, ``cooking_style``) or ``oneshot``.
    A rule value of ``"!transport"`` or ``"!refusal"`` raises the matching
    backend error instead of answering.

    ``truth`` is a triple dict or a list of them (mixed meals);
    ``truth_by_image`` overrides it per sha256 digest of the image bytes.
    """

    rules: dict = field(default_factory=dict)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seed: int = 0
    truth: object = None
    truth_by_image: dict = field(default_factory=dict)
    offtaxonomy_pool: tuple = DEFAULT_FOREIGN_LABELS
    delay: float = 0.0

    def __post_init__(self):
        self.rules = {(_stage_token(s), int(a)): text for (s, a), text in self.rules.items()}
        if self.delay < 0:
            raise ValueError("delay must be >= 0")
        if not self.offtaxonomy_pool:
            raise ValueError("offtaxonomy_pool must be non-empty")


def load_mock_script(source) -> MockScript:
    """Read a YAML mock script.

    Rules are written as ``"stage:attempt": response``, e.g.
    ``"1:0": '{"category": "Protein Sources"}'``.
    """
    data = source.read() if hasattr(source, "read") else source
    try:
        doc = yaml.safe_load(data) or {}
    except yaml.YAMLError as exc:
        raise FormatError(f"mock script is not valid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise FormatError("mock script must be a mapping")
    rules = {}
    for key, text in (doc.get("rules") or {}).items():
        stage, sep, attempt = str(key).rpartition(":")
        if not sep or not attempt.isdigit():
            raise FormatError(f"rule key {key!r} must look like 'stage:attempt'")
        try:
            rules[(_stage_token(stage), int(attempt))] = str(text)
        except ValueError:
            raise FormatError(f"rule key {key!r} names an unknown stage") from None
    try:
        return MockScript(
            rules=rules,
            noise=NoiseConfig(**(doc.get("noise") or {})),
            seed=int(doc.get("seed", 0)),
            truth=doc.get("truth"),
            truth_by_image=doc.get("truth_by_image") or {},
            offtaxonomy_pool=tuple(doc.get("offtaxonomy_pool") or DEFAULT_FOREIGN_LABELS),
            delay=float(doc.get("delay", 0.0)),
        )
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad mock script: {exc}") from None


@dataclass(frozen=True)
class MockCall:
    stage: str
    attempt: int
    mode: str
    response: str
    image_digest: str


@dataclass
class _PromptInfo:
    stage: str
    mode: str
    candidates: list
    context: dict
    mixed_limit: int = 0
    vocab: dict = field(default_factory=dict)


def read_prompt(prompt: str) -> _PromptInfo:
    """Recover stage, recovery mode, candidates and context from a prompt."""
    lines = prompt.splitlines()
    head = lines[0] if lines else ""
    if head.startswith(ONE_SHOT_HEADER):
        vocab = {}
        for line, key in (("Categories: ", "category"), ("Subcategories: ", "subcategory"), ("Cooking styles: ", "cooking_style")):
            for ln in lines:
                if ln.startswith(line):
                    vocab[key] = ln[len(line):].split(", ")
        return _PromptInfo(ONE_SHOT, "Base", [], {}, vocab=vocab)
    match = re.match(r"Stage (\d):", head)
    stage = StageId(int(match.group(1))).key if match else "category"
    cands: list = []
    for ln in lines:
        if ln.startswith(CANDIDATES_PREFIX):
            cands = ln[len(CANDIDATES_PREFIX):].split(", ")
            break
    context = {}
    for ln in lines:
        if ln.startswith("Context:"):
            context = dict(_CONTEXT_RE.findall(ln))
    if any(ln.startswith(CONSTRAINED_CHOICE_MARKER) for ln in lines):
        mode = "ConstrainedChoice"
    elif any(ln.startswith(STRICT_FORMAT_MARKER) for ln in lines):
        mode = "StrictFormat"
    else:
        mode = "Base"
    limit = 0
    for ln in lines:
        if ln.startswith(MIXED_MARKER):
            found = _MAX_ITEMS_RE.search(ln)
            limit = int(found.group(1)) if found else 2
    return _PromptInfo(stage, mode, cands, context, limit)


class MockBackend:
    """Deterministic stand-in for a model backend.

    Single-threaded per instance; ``calls`` records every query in order.
    """

    max_concurrency = 1

    def __init__(self, script: MockScript | None = None):
        self.script = script or MockScript()
        self._rng = random.Random(self.script.seed)
        self._attempt: dict[str, int] = {}
        self.calls: list[MockCall] = []

    def reset(self):
        self._rng = random.Random(self.script.seed)
        self._attempt.clear()
        self.calls.clear()

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def calls_by_stage(self) -> dict[str, int]:
        out = {tok: 0 for tok in STAGE_TOKENS}
        for call in self.calls:
            out[call.stage] += 1
        return out

    def query(self, request: BackendRequest) -> BackendResponse:
        start = time.perf_counter()
        info = read_prompt(request.prompt)
        if info.mode == "Base":
            attempt = 0
        else:
            attempt = self._attempt.get(info.stage, 0) + 1
        self._attempt[info.stage] = attempt
        digest = hashlib.sha256(request.image.data).hexdigest()

        rule = self.script.rules.get((info.stage, attempt))
        if rule is not None:
            text = rule
        elif info.stage == ONE_SHOT:
            text = self._one_shot(info, digest)
        else:
            text = self._staged(info, digest)

        if self.script.delay:
            time.sleep(self.script.delay)
        self.calls.append(MockCall(info.stage, attempt, info.mode, text, digest))
        if text == "!transport":
            raise TransportError("scripted transport failure")
        if text == "!refusal":
            raise BackendRefusal("scripted refusal")
        return BackendResponse(
            text=text,
            latency=time.perf_counter() - start,
            attempt_meta={"stage": info.stage, "attempt": attempt, "mode": info.mode},
        )

    # -- generation ---------------------------------------------------------

    def _truth_items(self, digest: str) -> list[dict]:
        truth = self.script.truth_by_image.get(digest, self.script.truth)
        if truth is None:
            return []
        if isinstance(truth, dict):
            return [truth]
        return list(truth)

    def _clean(self, info: _PromptInfo, digest: str) -> list[str]:
        items = self._truth_items(digest)
        key = info.stage
        if key == "category":
            picks = [t.get(key) for t in items if t.get(key) in info.candidates]
            if not info.mixed_limit:
                picks = picks[:1]
            return picks[: max(info.mixed_limit, 1)] or info.candidates[:1]
        for t in items:
            if all(t.get(k) == v for k, v in info.context.items()) and t.get(key) in info.candidates:
                return [t[key]]
        return info.candidates[:1]

    def _corrupt(self, label: str, pool) -> str:
        rng = self._rng
        if rng.random() < self.script.noise.p_offtaxonomy:
            return rng.choice(list(pool))
        if rng.random() < self.script.noise.p_nearmiss:
            return near_miss(label, rng)
        return label

    def _malformed(self, key: str, label: str) -> str:
        forms = (
            f"The food in the image looks like {label}.",
            f'Sure! Here is the answer: {{"{key}": "{label}"}}',
            f'```json\n{{"{key}": "{label}"}}\n```',
            f'{{"{key}": "{label}", "confidence": 0.9}}',
            f'{{"label": "{label}"}}',
            f'{{"{key}": "{label[: max(1, len(label) // 2)]}',
            f'{{"{key}": 1}}',
        )
        return forms[self._rng.randrange(len(forms))]

    def _staged(self, info: _PromptInfo, digest: str) -> str:
        clean = self._clean(info, digest)
        key = info.stage
        if self._rng.random() < self.script.noise.p_malformed:
            return self._malformed(key, clean[0])
        labels = [self._corrupt(lab, self.script.offtaxonomy_pool) for lab in clean]
        if info.mixed_limit and len(labels) > 1:
            return json.dumps([{key: lab} for lab in labels])
        return json.dumps({key: labels[0]})

    def _one_shot(self, info: _PromptInfo, digest: str) -> str:
        items = self._truth_items(digest)
        truth = items[0] if items else {}
        answer = {}
        for key in ("category", "subcategory", "cooking_style"):
            vocab = info.vocab.get(key) or ["unknown"]
            answer[key] = truth.get(key) or vocab[0]
        if self._rng.random() < self.script.noise.p_malformed:
            return self._malformed("category", answer["category"])
        for key in answer:
            pool = list(self.script.offtaxonomy_pool) + list(info.vocab.get(key, []))
            answer[key] = self._corrupt(answer[key], pool)
        return json.dumps(answer)


def near_miss(label: str, rng: random.Random) -> str:
    """A plausible misspelling: case, hyphenation, plural, dropped or swapped letter."""
    ops = ["lower", "upper", "plural", "drop", "swap", "period"]
    if " " in label:
        ops.append("hyphen")
    op = ops[rng.randrange(len(ops))]
    if op == "lower":
        return label.lower()
    if op == "upper":
        return label.upper()
    if op == "plural":
        return label + "s"
    if op == "period":
        return label + "."
    if op == "hyphen":
        return label.replace(" ", "-")
    if len(label) < 3:
        return label + "s"
    i = rng.randrange(1, len(label) - 1)
    if op == "drop":
        return label[:i] + label[i + 1:]
    return label[:i] + label[i + 1] + label[i] + label[i + 2:]


def make_mock_backend(script: MockScript | None = None) -> MockBackend:
    return MockBackend(script)
