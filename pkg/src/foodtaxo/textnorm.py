"""Strict JSON extraction, surface normalization and canonical label mapping."""

from __future__ import annotations

import enum
import json
import re
import string
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import yaml

from .errors import FormatError, ParseFailure

if TYPE_CHECKING:
    from .ontology import Label, StageId, Taxonomy

DEFAULT_TAU = 0.8

_PUNCT = string.punctuation.replace("-", "")
_STRIP_TABLE = str.maketrans({"-": " ", **{ch: None for ch in _PUNCT}})
_WS = re.compile(r"\s+")


def normalize_surface(s: str) -> str:
    """Lowercase, drop ASCII punctuation, turn hyphens into spaces, squeeze whitespace."""
    return _WS.sub(" ", s.lower().translate(_STRIP_TABLE)).strip()


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def similarity(a: str, b: str) -> float:
    """1 - levenshtein(a, b) / max(len(a), len(b)); 1.0 for two empty strings."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


# -- parsing -----------------------------------------------------------------


@dataclass(frozen=True)
class ParsedResponse:
    """Items extracted from a strict-JSON model response.

    Each item maps every expected field name to its raw string value.
    """

    items: tuple[dict[str, str], ...]
    fields: tuple[str, ...]

    def values(self, field_name: str | None = None) -> list[str]:
        key = field_name or self.fields[0]
        return [item[key] for item in self.items]


def _no_duplicates(pairs):
    keys = [k for k, _ in pairs]
    if len(keys) != len(set(keys)):
        raise ParseFailure(f"duplicate key in object: {keys}")
    return dict(pairs)


def _check_object(obj, fields: tuple[str, ...]) -> dict[str, str]:
    if not isinstance(obj, dict):
        raise ParseFailure(f"expected a JSON object, got {type(obj).__name__}")
    if set(obj) != set(fields):
        raise ParseFailure(f"expected keys {list(fields)}, got {list(obj)}")
    for key in fields:
        value = obj[key]
        if not isinstance(value, str):
            raise ParseFailure(f"value of {key!r} must be a string")
        if not value.strip():
            raise ParseFailure(f"value of {key!r} is empty")
    return {key: obj[key] for key in fields}


def parse_strict_json(
    text: str, expected_field: str | Sequence[str], max_items: int = 1
) -> ParsedResponse:
    """Accept exactly one JSON object with the expected key set and string values.

    With ``max_items > 1`` a JSON array of at most ``max_items`` such objects
    is accepted as well. Only surrounding whitespace is tolerated: prose,
    code fences, extra keys or non-string values raise :class:`ParseFailure`.
    """
    if max_items < 1:
        raise ValueError("max_items must be positive")
    fields = (expected_field,) if isinstance(expected_field, str) else tuple(expected_field)
    if not isinstance(text, str):
        raise ParseFailure("response is not text")
    try:
        doc = json.loads(text.strip(), object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ParseFailure(f"not strict JSON: {exc.msg}") from None
    if isinstance(doc, list):
        if max_items == 1:
            raise ParseFailure("a JSON array is only accepted in multi-item mode")
        if not doc:
            raise ParseFailure("empty item list")
        if len(doc) > max_items:
            raise ParseFailure(f"{len(doc)} items exceed the limit of {max_items}")
        items = tuple(_check_object(obj, fields) for obj in doc)
    else:
        items = (_check_object(doc, fields),)
    return ParsedResponse(items=items, fields=fields)


# -- canonical mapping -------------------------------------------------------


class MatchKind(str, enum.Enum):
    EXACT = "Exact"
    SYNONYM = "Synonym"
    APPROX = "Approx"
    AMBIGUOUS = "Ambiguous"
    NONE = "None"


@dataclass(frozen=True)
class MatchOutcome:
    kind: MatchKind
    raw: str
    label: str | None = None
    score: float | None = None

    @property
    def matched(self) -> bool:
        return self.kind in (MatchKind.EXACT, MatchKind.SYNONYM, MatchKind.APPROX)

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value, "raw": self.raw}
        if self.label is not None:
            out["label"] = self.label
        if self.score is not None:
            out["score"] = self.score
        return out


@dataclass(frozen=True)
class NormalizerConfig:
    """Similarity threshold and per-level synonym table.

    ``synonyms`` maps a level (StageId) to {normalized surface: canonical}.
    """

    tau: float = DEFAULT_TAU
    synonyms: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")


def canonicalize(
    raw: str,
    candidates: Sequence["Label"],
    config: NormalizerConfig | None = None,
    allow_approx: bool = False,
) -> MatchOutcome:
    if not candidates:
        raise ValueError("candidates must be non-empty")
    config = config or NormalizerConfig()
    norm = normalize_surface(raw)

    for lab in candidates:
        if norm in lab.surface_forms():
            return MatchOutcome(MatchKind.EXACT, raw, lab.canonical)

    table = config.synonyms.get(candidates[0].level, {})
    target = table.get(norm)
    if target is not None:
        for lab in candidates:
            if lab.canonical == target:
                return MatchOutcome(MatchKind.SYNONYM, raw, lab.canonical)

    if not allow_approx:
        return MatchOutcome(MatchKind.NONE, raw)

    scored = [(similarity(norm, normalize_surface(lab.canonical)), lab) for lab in candidates]
    best = max(score for score, _ in scored)
    if best < config.tau:
        return MatchOutcome(MatchKind.NONE, raw)
    winners = [lab for score, lab in scored if score == best]
    if len(winners) > 1:
        return MatchOutcome(MatchKind.AMBIGUOUS, raw)
    return MatchOutcome(MatchKind.APPROX, raw, winners[0].canonical, best)


def load_synonyms(source, taxonomy: "Taxonomy", tau: float = DEFAULT_TAU) -> NormalizerConfig:
    """Read a YAML synonym table into a :class:`NormalizerConfig`.

    Format: one key per level (``category``, ``subcategory``,
    ``cooking_style``), each a list of ``{surface, canonical}`` entries.
    """
    from .ontology import StageId

    data = source.read() if hasattr(source, "read") else source
    try:
        doc = yaml.safe_load(data) or {}
    except yaml.YAMLError as exc:
        raise FormatError(f"synonym table is not valid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise FormatError("synonym table must be a mapping of level -> entries")
    table: dict = {}
    for key, entries in doc.items():
        try:
            level = StageId.parse(key)
        except ValueError:
            raise FormatError(f"unknown level {key!r} in synonym table") from None
        canon_forms = {normalize_surface(lab.canonical): lab.canonical for lab in taxonomy.labels(level)}
        level_map = table.setdefault(level, {})
        for entry in entries or []:
            if not isinstance(entry, dict) or "surface" not in entry or "canonical" not in entry:
                raise FormatError(f"bad synonym entry under {key!r}: {entry!r}")
            surface = normalize_surface(str(entry["surface"]))
            canonical = str(entry["canonical"])
            if not taxonomy.has_label(level, canonical):
                raise FormatError(f"synonym target {canonical!r} is not a {level.key} label")
            holder = canon_forms.get(surface)
            if holder is not None and holder != canonical:
                raise FormatError(f"synonym {surface!r} shadows the label {holder!r}")
            level_map[surface] = canonical
    return NormalizerConfig(tau=tau, synonyms=table)
