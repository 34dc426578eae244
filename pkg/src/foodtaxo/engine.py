"""Three-stage hierarchical inference with validation and bounded recovery.

Each stage asks the backend to pick one label from the candidates the
taxonomy allows under the upstream decisions. A response is accepted only
after it parses as strict JSON, maps onto a candidate and is a valid child
of its parent. Failures walk a fixed ladder of stricter re-prompts and end
with a deterministic canonical-mapping pass; if nothing passes, the stage
emits ``unknown`` with an error code and every later stage is skipped.
"""

from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import prompts
from .backend.base import BackendRequest, DecodeParams
from .errors import BackendRefusal, ParseFailure, TransportError
from .imageio import PreparedImage
from .ontology import UNKNOWN, Label, StageId, Taxonomy, candidates, is_valid_child
from .textnorm import (
    MatchKind,
    MatchOutcome,
    NormalizerConfig,
    canonicalize,
    normalize_surface,
    parse_strict_json,
)

logger = logging.getLogger(__name__)

FIELDS = tuple(stage.key for stage in StageId)


class Mode(str, enum.Enum):
    BASE = "Base"
    STRICT_FORMAT = "StrictFormat"
    CONSTRAINED_CHOICE = "ConstrainedChoice"
    CANONICAL_MAPPING = "CanonicalMapping"


class CheckOutcome(str, enum.Enum):
    PASS = "Pass"
    FAIL_PARSE = "FailParse"
    FAIL_MEMBERSHIP = "FailMembership"
    FAIL_HIERARCHY = "FailHierarchy"
    FAIL_BACKEND = "FailBackend"


class ErrorCode(str, enum.Enum):
    E_PARSE = "E_PARSE"
    E_MEMBERSHIP = "E_MEMBERSHIP"
    E_HIERARCHY = "E_HIERARCHY"
    E_BACKEND = "E_BACKEND"
    E_PROPAGATED = "E_PROPAGATED"


_CODE_FOR = {
    CheckOutcome.FAIL_PARSE: ErrorCode.E_PARSE,
    CheckOutcome.FAIL_MEMBERSHIP: ErrorCode.E_MEMBERSHIP,
    CheckOutcome.FAIL_HIERARCHY: ErrorCode.E_HIERARCHY,
    CheckOutcome.FAIL_BACKEND: ErrorCode.E_BACKEND,
}

LADDER = (Mode.STRICT_FORMAT, Mode.CONSTRAINED_CHOICE, Mode.CANONICAL_MAPPING)


@dataclass(frozen=True)
class RecoveryPolicy:
    """At most ``max_retries`` re-prompts per stage.

    Retry 1 is strict-format, retries 2..R constrained-choice. Canonical
    mapping runs afterwards on the latest output and costs no model call;
    ``canonical_mapping=False`` disables it for ablations.
    """

    max_retries: int = 3
    canonical_mapping: bool = True

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @property
    def ladder(self) -> tuple[Mode, ...]:
        return LADDER

    def retry_modes(self) -> list[Mode]:
        modes = [Mode.STRICT_FORMAT, Mode.CONSTRAINED_CHOICE]
        modes += [Mode.CONSTRAINED_CHOICE] * max(0, self.max_retries - 2)
        return modes[: self.max_retries]


@dataclass(frozen=True)
class Attempt:
    index: int
    mode: Mode
    prompt: str | None
    raw_response: str | None
    check_outcome: CheckOutcome
    matches: tuple[MatchOutcome, ...] = ()
    detail: str | None = None

    @property
    def match(self) -> MatchOutcome | None:
        return self.matches[0] if self.matches else None

    @property
    def called_backend(self) -> bool:
        return self.mode is not Mode.CANONICAL_MAPPING

    def to_dict(self) -> dict:
        out = {
            "index": self.index,
            "mode": self.mode.value,
            "prompt": self.prompt,
            "raw_response": self.raw_response,
            "check_outcome": self.check_outcome.value,
            "matches": [m.to_dict() for m in self.matches],
        }
        if self.detail:
            out["detail"] = self.detail
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Attempt":
        return cls(
            index=d["index"],
            mode=Mode(d["mode"]),
            prompt=d.get("prompt"),
            raw_response=d.get("raw_response"),
            check_outcome=CheckOutcome(d["check_outcome"]),
            matches=tuple(
                MatchOutcome(MatchKind(m["kind"]), m["raw"], m.get("label"), m.get("score"))
                for m in d.get("matches", [])
            ),
            detail=d.get("detail"),
        )


@dataclass(frozen=True)
class StageResult:
    stage: StageId
    accepted: str
    error_code: ErrorCode | None = None
    last_mode: Mode | None = None
    attempts: tuple[Attempt, ...] = ()
    accepted_items: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.accepted_items:
            object.__setattr__(self, "accepted_items", (self.accepted,))

    @property
    def is_unknown(self) -> bool:
        return self.accepted == UNKNOWN

    @property
    def backend_calls(self) -> int:
        return sum(1 for a in self.attempts if a.called_backend)

    def for_item(self, label: str) -> "StageResult":
        return StageResult(self.stage, label, self.error_code, self.last_mode, self.attempts, (label,))

    def to_dict(self) -> dict:
        return {
            "stage": self.stage.key,
            "accepted": self.accepted,
            "error_code": self.error_code.value if self.error_code else None,
            "last_mode": self.last_mode.value if self.last_mode else None,
            "attempts": [a.to_dict() for a in self.attempts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageResult":
        return cls(
            stage=StageId.parse(d["stage"]),
            accepted=d["accepted"],
            error_code=ErrorCode(d["error_code"]) if d.get("error_code") else None,
            last_mode=Mode(d["last_mode"]) if d.get("last_mode") else None,
            attempts=tuple(Attempt.from_dict(a) for a in d.get("attempts", [])),
        )


@dataclass(frozen=True)
class Triple:
    category: str = UNKNOWN
    subcategory: str = UNKNOWN
    cooking_style: str = UNKNOWN

    def to_dict(self) -> dict:
        return {"category": self.category, "subcategory": self.subcategory, "cooking_style": self.cooking_style}

    def get(self, stage: StageId) -> str:
        return getattr(self, StageId.parse(stage).key)

    @property
    def complete(self) -> bool:
        return UNKNOWN not in (self.category, self.subcategory, self.cooking_style)


@dataclass(frozen=True)
class PredictionRecord:
    image_id: str
    items: tuple[Triple, ...]
    stage_results: tuple[tuple[StageResult, ...], ...] = ()
    mode: str = "staged"
    mixed: bool = False

    @property
    def backend_calls(self) -> int:
        # mixed-meal items and one-shot stages share Attempt objects
        seen = {
            id(a): a
            for per_item in self.stage_results
            for res in per_item
            for a in res.attempts
        }
        return sum(1 for a in seen.values() if a.called_backend)

    def output(self):
        if self.mixed:
            return [item.to_dict() for item in self.items]
        return self.items[0].to_dict()

    def output_json(self) -> str:
        return json.dumps(self.output(), ensure_ascii=False)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "mode": self.mode,
            "mixed": self.mixed,
            "items": [item.to_dict() for item in self.items],
            "stage_results": [[r.to_dict() for r in per_item] for per_item in self.stage_results],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionRecord":
        items = d.get("items")
        if items is None:
            items = [{k: d[k] for k in FIELDS}]
        return cls(
            image_id=str(d.get("image_id", "")),
            items=tuple(Triple(**{k: item[k] for k in FIELDS}) for item in items),
            stage_results=tuple(
                tuple(StageResult.from_dict(r) for r in per_item) for per_item in d.get("stage_results", [])
            ),
            mode=d.get("mode", "staged"),
            mixed=bool(d.get("mixed", False)),
        )


# -- prompts -----------------------------------------------------------------


def _decided(decided: Mapping | None) -> dict[StageId, str]:
    return {StageId.parse(k): v for k, v in (decided or {}).items()}


def candidates_text(cands: Sequence[Label]) -> str:
    return ", ".join(lab.canonical if isinstance(lab, Label) else str(lab) for lab in cands)


def build_prompt(
    stage: StageId,
    decided: Mapping | None,
    cands: Sequence[Label],
    mode: Mode = Mode.BASE,
    max_items: int = 1,
) -> str:
    """Render the stage template, then the recovery instructions for ``mode``."""
    stage = StageId.parse(stage)
    if not cands:
        raise ValueError("candidates must be non-empty")
    if mode is Mode.CANONICAL_MAPPING:
        raise ValueError("canonical mapping does not prompt the model")
    decided = _decided(decided)
    cands_txt = candidates_text(cands)
    values = {"candidates_txt": cands_txt}
    if stage >= StageId.SUBCATEGORY:
        values["category"] = decided[StageId.CATEGORY]
    if stage is StageId.COOKING_STYLE:
        values["subcategory"] = decided[StageId.SUBCATEGORY]
    parts = [prompts.render(prompts.load_template(prompts.STAGE_TEMPLATES[int(stage)]), **values)]
    if stage is StageId.CATEGORY and max_items > 1:
        parts.append(prompts.render(prompts.load_template("mixed.txt"), max_items=str(max_items)))
    if mode in (Mode.STRICT_FORMAT, Mode.CONSTRAINED_CHOICE):
        parts.append(prompts.render(prompts.load_template("strict_format.txt"), field=stage.key))
    if mode is Mode.CONSTRAINED_CHOICE:
        parts.append(prompts.render(prompts.load_template("constrained_choice.txt"), candidates_txt=cands_txt))
    return "\n".join(parts)


def build_one_shot_prompt(taxonomy: Taxonomy) -> str:
    return prompts.render(
        prompts.load_template("one_shot.txt"),
        categories_txt=candidates_text(taxonomy.categories),
        subcategories_txt=candidates_text(taxonomy.subcategories),
        styles_txt=candidates_text(taxonomy.cooking_styles),
    )


# -- validation --------------------------------------------------------------


def _hierarchy_ok(taxonomy: Taxonomy, stage: StageId, label: str, decided: dict[StageId, str]) -> bool:
    if stage is StageId.CATEGORY:
        return taxonomy.has_label(StageId.CATEGORY, label)
    parent_stage = StageId(stage - 1)
    parent = taxonomy.label(parent_stage, decided[parent_stage])
    ok = is_valid_child(taxonomy, parent, taxonomy.label(stage, label))
    if stage is StageId.COOKING_STYLE:
        ok = ok and taxonomy.parent_of[decided[StageId.SUBCATEGORY]] == decided[StageId.CATEGORY]
    return ok


def _validate_value(value, cands, taxonomy, decided, config, allow_approx):
    stage = cands[0].level
    match = canonicalize(value, cands, config, allow_approx=allow_approx)
    if not match.matched:
        return CheckOutcome.FAIL_MEMBERSHIP, match
    if match.label not in {c.canonical for c in cands}:
        return CheckOutcome.FAIL_MEMBERSHIP, match
    if not _hierarchy_ok(taxonomy, stage, match.label, decided):
        return CheckOutcome.FAIL_HIERARCHY, match
    return CheckOutcome.PASS, match


def validate(parsed, cands, taxonomy, decided, config=None, allow_approx=False):
    """Membership and hierarchy checks for one parsed item.

    Returns ``(CheckOutcome, MatchOutcome)``. The parse check has already
    happened; ``parsed`` is a ParsedResponse or a raw label string.
    """
    if not isinstance(parsed, str):
        values = parsed.values()
        if len(values) != 1:
            raise ValueError("validate takes a single-item response")
        parsed = values[0]
    return _validate_value(parsed, cands, taxonomy, _decided(decided), config or NormalizerConfig(), allow_approx)


def _is_abstention(value: str) -> bool:
    return normalize_surface(value) == UNKNOWN


def _check_response(text, stage, cands, taxonomy, decided, config, allow_approx, max_items):
    """Parse + validate every item. Returns (outcome, matches, labels, abstained, detail)."""
    try:
        parsed = parse_strict_json(text, stage.key, max_items=max_items)
    except ParseFailure as exc:
        return CheckOutcome.FAIL_PARSE, (), (), False, str(exc)
    values = parsed.values()
    if stage is StageId.CATEGORY:
        kept = [v for v in values if not _is_abstention(v)]
        if not kept:
            return CheckOutcome.FAIL_MEMBERSHIP, tuple(MatchOutcome(MatchKind.NONE, v) for v in values), (), True, "model abstained"
        values = kept
    matches = []
    worst = CheckOutcome.PASS
    for value in values:
        outcome, match = _validate_value(value, cands, taxonomy, decided, config, allow_approx)
        matches.append(match)
        if outcome is not CheckOutcome.PASS and worst is CheckOutcome.PASS:
            worst = outcome
    labels = tuple(m.label for m in matches) if worst is CheckOutcome.PASS else ()
    return worst, tuple(matches), labels, False, None


# -- stages ------------------------------------------------------------------


def run_stage(
    backend,
    taxonomy: Taxonomy,
    stage: StageId,
    decided: Mapping | None,
    image: PreparedImage,
    policy: RecoveryPolicy | None = None,
    config: NormalizerConfig | None = None,
    max_items: int = 1,
    decode: DecodeParams | None = None,
) -> StageResult:
    stage = StageId.parse(stage)
    decided = _decided(decided)
    policy = policy or RecoveryPolicy()
    config = config or NormalizerConfig()
    decode = decode or DecodeParams()
    if stage is not StageId.CATEGORY:
        max_items = 1

    if any(decided.get(prior) == UNKNOWN for prior in StageId if prior < stage):
        return StageResult(stage, UNKNOWN, ErrorCode.E_PROPAGATED, None, ())

    cands = candidates(taxonomy, stage, decided)
    attempts: list[Attempt] = []
    last_raw: str | None = None
    last_fail = CheckOutcome.FAIL_BACKEND

    def accepted(labels, mode):
        return StageResult(stage, labels[0], None, mode, tuple(attempts), labels)

    for index, mode in enumerate([Mode.BASE] + policy.retry_modes()):
        prompt = build_prompt(stage, decided, cands, mode, max_items=max_items)
        try:
            response = backend.query(BackendRequest(image, prompt, decode))
        except (TransportError, BackendRefusal) as exc:
            logger.info("%s attempt %d: backend error %s", stage.key, index, exc)
            attempts.append(Attempt(index, mode, prompt, None, CheckOutcome.FAIL_BACKEND, (), str(exc)))
            last_fail = CheckOutcome.FAIL_BACKEND
            continue
        last_raw = response.text
        outcome, matches, labels, abstained, detail = _check_response(
            response.text, stage, cands, taxonomy, decided, config, False, max_items
        )
        attempts.append(Attempt(index, mode, prompt, response.text, outcome, matches, detail))
        if outcome is CheckOutcome.PASS:
            return accepted(labels, mode)
        if abstained:
            return StageResult(stage, UNKNOWN, ErrorCode.E_MEMBERSHIP, mode, tuple(attempts))
        last_fail = outcome

    if policy.canonical_mapping and last_raw is not None:
        outcome, matches, labels, _, detail = _check_response(
            last_raw, stage, cands, taxonomy, decided, config, True, max_items
        )
        attempts.append(Attempt(len(attempts), Mode.CANONICAL_MAPPING, None, last_raw, outcome, matches, detail))
        if outcome is CheckOutcome.PASS:
            return accepted(labels, Mode.CANONICAL_MAPPING)
        last_fail = outcome

    last_mode = attempts[-1].mode if attempts else None
    return StageResult(stage, UNKNOWN, _CODE_FOR[last_fail], last_mode, tuple(attempts))


def classify(
    backend,
    taxonomy: Taxonomy,
    image: PreparedImage,
    policy: RecoveryPolicy | None = None,
    config: NormalizerConfig | None = None,
    mixed_mode: bool = False,
    max_items: int = 1,
    image_id: str = "",
    decode: DecodeParams | None = None,
) -> PredictionRecord:
    """Run category -> subcategory -> cooking style for one image.

    Never raises for model misbehaviour; failures surface as ``unknown``
    fields with error codes in ``stage_results``.
    """
    if max_items < 1:
        raise ValueError("max_items must be positive")
    kwargs = dict(policy=policy, config=config, decode=decode)
    first = run_stage(
        backend, taxonomy, StageId.CATEGORY, {}, image, max_items=max_items if mixed_mode else 1, **kwargs
    )
    labels = first.accepted_items if mixed_mode else (first.accepted,)
    items, results = [], []
    for category in labels:
        r1 = first.for_item(category) if mixed_mode else first
        decided = {StageId.CATEGORY: category}
        r2 = run_stage(backend, taxonomy, StageId.SUBCATEGORY, decided, image, **kwargs)
        decided[StageId.SUBCATEGORY] = r2.accepted
        r3 = run_stage(backend, taxonomy, StageId.COOKING_STYLE, decided, image, **kwargs)
        items.append(Triple(category, r2.accepted, r3.accepted))
        results.append((r1, r2, r3))
    return PredictionRecord(image_id, tuple(items), tuple(results), "staged", bool(mixed_mode))


def classify_one_shot(
    backend,
    taxonomy: Taxonomy,
    image: PreparedImage,
    config: NormalizerConfig | None = None,
    image_id: str = "",
    decode: DecodeParams | None = None,
) -> PredictionRecord:
    """Baseline: one unconstrained call for all three fields.

    No stage-wise candidate restriction, no hierarchy check, no retries.
    Each field is mapped onto its level by exact or synonym match only, so
    the triple may be internally inconsistent.
    """
    config = config or NormalizerConfig()
    prompt = build_one_shot_prompt(taxonomy)
    try:
        response = backend.query(BackendRequest(image, prompt, decode or DecodeParams()))
    except (TransportError, BackendRefusal) as exc:
        attempt = Attempt(0, Mode.BASE, prompt, None, CheckOutcome.FAIL_BACKEND, (), str(exc))
        res = tuple(StageResult(s, UNKNOWN, ErrorCode.E_BACKEND, Mode.BASE, (attempt,)) for s in StageId)
        return PredictionRecord(image_id, (Triple(),), (res,), "one_shot")
    try:
        parsed = parse_strict_json(response.text, FIELDS)
    except ParseFailure as exc:
        attempt = Attempt(0, Mode.BASE, prompt, response.text, CheckOutcome.FAIL_PARSE, (), str(exc))
        res = tuple(StageResult(s, UNKNOWN, ErrorCode.E_PARSE, Mode.BASE, (attempt,)) for s in StageId)
        return PredictionRecord(image_id, (Triple(),), (res,), "one_shot")

    item = parsed.items[0]
    matches = tuple(canonicalize(item[s.key], list(taxonomy.labels(s)), config) for s in StageId)
    overall = CheckOutcome.PASS if all(m.matched for m in matches) else CheckOutcome.FAIL_MEMBERSHIP
    attempt = Attempt(0, Mode.BASE, prompt, response.text, overall, matches)
    results = []
    for stage, match in zip(StageId, matches):
        if match.matched:
            results.append(StageResult(stage, match.label, None, Mode.BASE, (attempt,)))
        else:
            results.append(StageResult(stage, UNKNOWN, ErrorCode.E_MEMBERSHIP, Mode.BASE, (attempt,)))
    triple = Triple(*(r.accepted for r in results))
    return PredictionRecord(image_id, (triple,), (tuple(results),), "one_shot")


def classify_many(
    backend,
    taxonomy: Taxonomy,
    images: Sequence[tuple[str, PreparedImage]],
    policy: RecoveryPolicy | None = None,
    config: NormalizerConfig | None = None,
    mixed_mode: bool = False,
    max_items: int = 1,
    one_shot: bool = False,
    workers: int = 1,
    decode: DecodeParams | None = None,
) -> list[PredictionRecord]:
    """Classify ``(image_id, image)`` pairs, in order.

    Runs up to ``min(workers, backend.max_concurrency)`` images at once;
    each image's stages stay sequential.
    """

    def one(pair):
        image_id, image = pair
        if one_shot:
            return classify_one_shot(backend, taxonomy, image, config, image_id, decode)
        return classify(backend, taxonomy, image, policy, config, mixed_mode, max_items, image_id, decode)

    limit = max(1, min(workers, getattr(backend, "max_concurrency", 1)))
    if limit == 1:
        return [one(pair) for pair in images]
    with ThreadPoolExecutor(max_workers=limit) as pool:
        return list(pool.map(one, images))
