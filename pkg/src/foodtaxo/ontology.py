"""Typed three-level food taxonomy and stage-specific candidate sets.

The taxonomy is loaded from a YAML document::

    version: fixture-1
    categories:
      - name: Protein Sources
        aliases: [protein]
    subcategories:
      - name: Burger
        parent: Protein Sources
        styles: [Grilled, Fried]      # optional, defaults to every style
    cooking_styles:
      - name: Grilled

Declaration order is kept everywhere and becomes the candidate order shown
to the model.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import IO, Mapping, Union

import yaml

from .errors import FormatError, IntegrityError, InvalidContext, UnknownLabel
from .textnorm import normalize_surface

UNKNOWN = "unknown"


class StageId(enum.IntEnum):
    """Taxonomy level, which is also the inference stage that predicts it."""

    CATEGORY = 1
    SUBCATEGORY = 2
    COOKING_STYLE = 3

    @property
    def key(self) -> str:
        return _STAGE_KEYS[self]

    @classmethod
    def parse(cls, value) -> "StageId":
        if isinstance(value, StageId):
            return value
        if isinstance(value, int) or (isinstance(value, str) and value.isdigit()):
            return cls(int(value))
        text = str(value).strip().lower()
        for stage, key in _STAGE_KEYS.items():
            if text in (key, stage.name.lower()):
                return stage
        raise ValueError(f"not a stage: {value!r}")


_STAGE_KEYS = {
    StageId.CATEGORY: "category",
    StageId.SUBCATEGORY: "subcategory",
    StageId.COOKING_STYLE: "cooking_style",
}

Level = StageId


@dataclass(frozen=True)
class Label:
    canonical: str
    level: StageId
    aliases: tuple[str, ...] = ()

    def __str__(self) -> str:
        return self.canonical

    def surface_forms(self) -> tuple[str, ...]:
        """Normalized canonical name followed by normalized aliases."""
        return (normalize_surface(self.canonical),) + tuple(
            normalize_surface(a) for a in self.aliases
        )


Decided = Mapping[StageId, str]


@dataclass(frozen=True)
class Taxonomy:
    """Immutable three-level hierarchy.

    ``parent_of`` maps subcategory -> category and ``styles_of`` maps
    (category, subcategory) -> ordered cooking styles.
    """

    version: str
    categories: tuple[Label, ...]
    subcategories: tuple[Label, ...]
    cooking_styles: tuple[Label, ...]
    parent_of: dict[str, str] = field(compare=True)
    styles_of: dict[tuple[str, str], tuple[str, ...]] = field(compare=True)

    def __post_init__(self):
        index = {}
        for level in StageId:
            index[level] = {lab.canonical: lab for lab in self.labels(level)}
        object.__setattr__(self, "_index", index)
        children: dict[str, list[str]] = {c.canonical: [] for c in self.categories}
        for sub in self.subcategories:
            children[self.parent_of[sub.canonical]].append(sub.canonical)
        object.__setattr__(
            self, "_children", {k: tuple(v) for k, v in children.items()}
        )

    def labels(self, level: StageId) -> tuple[Label, ...]:
        level = StageId.parse(level)
        if level is StageId.CATEGORY:
            return self.categories
        if level is StageId.SUBCATEGORY:
            return self.subcategories
        return self.cooking_styles

    def label(self, level: StageId, name) -> Label:
        if isinstance(name, Label):
            name = name.canonical
        try:
            return self._index[StageId.parse(level)][name]
        except KeyError:
            raise UnknownLabel(f"{name!r} is not a {StageId.parse(level).key} label") from None

    def has_label(self, level: StageId, name: str) -> bool:
        return name in self._index[StageId.parse(level)]

    def children_of(self, category: str) -> tuple[str, ...]:
        """Subcategory names under ``category`` in declaration order."""
        try:
            return self._children[category]
        except KeyError:
            raise UnknownLabel(f"{category!r} is not a category label") from None

    def counts(self) -> dict[str, int]:
        return {level.key: len(self.labels(level)) for level in StageId}

    def all_labels(self) -> list[Label]:
        return [lab for level in StageId for lab in self.labels(level)]


# -- loading -----------------------------------------------------------------


def _read_document(source) -> object:
    if hasattr(source, "read"):
        data = source.read()
    else:
        data = source
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"taxonomy is not valid UTF-8: {exc}") from None
    try:
        return yaml.safe_load(data)
    except yaml.YAMLError as exc:
        raise FormatError(f"taxonomy is not valid YAML: {exc}") from None


def _entries(doc: dict, key: str) -> list[dict]:
    raw = doc.get(key)
    if not isinstance(raw, list) or not raw:
        raise FormatError(f"'{key}' must be a non-empty list")
    out = []
    for pos, entry in enumerate(raw):
        if isinstance(entry, str):
            entry = {"name": entry}
        if not isinstance(entry, dict):
            raise FormatError(f"{key}[{pos}] must be a mapping")
        name = entry.get("name")
        if not isinstance(name, str) or not name.strip():
            raise FormatError(f"{key}[{pos}] has no name")
        aliases = entry.get("aliases") or []
        if not isinstance(aliases, list) or not all(isinstance(a, str) for a in aliases):
            raise FormatError(f"{key}[{pos}] ({name}): aliases must be a list of strings")
        out.append(entry)
    return out


def _check_level(entries: list[dict], issues: list[tuple[str, str]]) -> None:
    # surface form -> owning label, across canonicals and aliases of the level
    owner: dict[str, str] = {}
    for entry in entries:
        name = entry["name"].strip()
        norm = normalize_surface(name)
        if "," in name or "\n" in name:
            issues.append((name, f"label {name!r} contains a comma or newline"))
        if norm == UNKNOWN or not norm:
            issues.append((name, f"label {name!r} collides with the reserved unknown sentinel"))
        if norm in owner:
            issues.append((name, f"duplicate label {name!r}"))
        else:
            owner[norm] = name
    for entry in entries:
        name = entry["name"].strip()
        for alias in entry.get("aliases") or []:
            norm = normalize_surface(alias)
            holder = owner.get(norm)
            if holder is not None and holder != name:
                issues.append((name, f"alias {alias!r} of {name!r} collides with {holder!r}"))
            else:
                owner[norm] = name


def _build(doc) -> tuple[Taxonomy | None, list[tuple[str, str]]]:
    if doc is None:
        raise FormatError("taxonomy document is empty")
    if not isinstance(doc, dict):
        raise FormatError("taxonomy document must be a mapping")
    version = doc.get("version")
    if version is None:
        raise FormatError("missing 'version'")
    cats = _entries(doc, "categories")
    subs = _entries(doc, "subcategories")
    styles = _entries(doc, "cooking_styles")

    issues: list[tuple[str, str]] = []
    for group in (cats, subs, styles):
        _check_level(group, issues)

    cat_names = [c["name"].strip() for c in cats]
    style_names = [s["name"].strip() for s in styles]
    parent_of: dict[str, str] = {}
    styles_of: dict[tuple[str, str], tuple[str, ...]] = {}
    for entry in subs:
        name = entry["name"].strip()
        parent = entry.get("parent")
        if isinstance(parent, list):
            if len(parent) != 1:
                issues.append((name, f"subcategory {name!r} must have exactly one parent, got {len(parent)}"))
                continue
            parent = parent[0]
        if not isinstance(parent, str):
            issues.append((name, f"subcategory {name!r} has no parent"))
            continue
        parent = parent.strip()
        if parent not in cat_names:
            issues.append((name, f"subcategory {name!r} is an orphan: parent {parent!r} is not a category"))
            continue
        if name in parent_of and parent_of[name] != parent:
            issues.append((name, f"subcategory {name!r} lists two parents"))
            continue
        if name in parent_of:
            continue
        parent_of[name] = parent
        declared = entry.get("styles")
        if declared is None:
            chosen = tuple(style_names)
        elif isinstance(declared, list) and all(isinstance(s, str) for s in declared):
            chosen = tuple(s.strip() for s in declared)
            missing = [s for s in chosen if s not in style_names]
            if missing:
                issues.append((name, f"subcategory {name!r} references undeclared styles {missing}"))
            if not chosen:
                issues.append((name, f"subcategory {name!r} has an empty style set"))
            if len(set(chosen)) != len(chosen):
                issues.append((name, f"subcategory {name!r} repeats a style"))
        else:
            raise FormatError(f"subcategory {name!r}: styles must be a list of names")
        styles_of[(parent, name)] = chosen

    for cat in cat_names:
        if cat not in parent_of.values():
            issues.append((cat, f"category {cat!r} has no subcategories"))

    if issues:
        return None, issues

    def labels(group, level):
        return tuple(
            Label(e["name"].strip(), level, tuple(a.strip() for a in e.get("aliases") or []))
            for e in group
        )

    seen = set()
    sub_labels = []
    for lab in labels(subs, StageId.SUBCATEGORY):
        if lab.canonical not in seen:
            seen.add(lab.canonical)
            sub_labels.append(lab)
    taxonomy = Taxonomy(
        version=str(version),
        categories=labels(cats, StageId.CATEGORY),
        subcategories=tuple(sub_labels),
        cooking_styles=labels(styles, StageId.COOKING_STYLE),
        parent_of=parent_of,
        styles_of=styles_of,
    )
    return taxonomy, []


def load_taxonomy(source: Union[IO, bytes, str]) -> Taxonomy:
    """Parse and validate a taxonomy document.

    ``source`` is a readable stream or the document itself (bytes or text).
    Raises FormatError for malformed input and IntegrityError, naming the
    offending label, for structural violations.
    """
    taxonomy, issues = _build(_read_document(source))
    if issues:
        raise IntegrityError(issues[0][0], [msg for _, msg in issues])
    return taxonomy


def audit_taxonomy(source) -> tuple[Taxonomy | None, list[str]]:
    """Like :func:`load_taxonomy` but returns every integrity issue.

    FormatError still propagates because nothing can be audited.
    """
    taxonomy, issues = _build(_read_document(source))
    return taxonomy, [msg for _, msg in issues]


def load_taxonomy_file(path) -> Taxonomy:
    with open(path, "rb") as fh:
        return load_taxonomy(fh)


def dump_taxonomy(t: Taxonomy) -> str:
    """Serialize with explicit style lists so a reload is exact."""

    def entry(lab: Label, **extra):
        out = {"name": lab.canonical}
        if lab.aliases:
            out["aliases"] = list(lab.aliases)
        out.update(extra)
        return out

    doc = {
        "version": t.version,
        "categories": [entry(c) for c in t.categories],
        "subcategories": [
            entry(
                s,
                parent=t.parent_of[s.canonical],
                styles=list(t.styles_of[(t.parent_of[s.canonical], s.canonical)]),
            )
            for s in t.subcategories
        ],
        "cooking_styles": [entry(s) for s in t.cooking_styles],
    }
    return yaml.safe_dump(doc, sort_keys=False, allow_unicode=True)


# -- queries -----------------------------------------------------------------


def _check_decided(t: Taxonomy, stage: StageId, decided: Decided) -> None:
    for prior in StageId:
        if prior >= stage:
            break
        if prior not in decided:
            raise InvalidContext(f"missing {prior.key} decision for {stage.key} stage")
        if not t.has_label(prior, decided[prior]):
            raise InvalidContext(f"{decided[prior]!r} is not a {prior.key} label")
    if stage is StageId.COOKING_STYLE:
        cat, sub = decided[StageId.CATEGORY], decided[StageId.SUBCATEGORY]
        if t.parent_of[sub] != cat:
            raise InvalidContext(f"{sub!r} is not a subcategory of {cat!r}")


def candidates(t: Taxonomy, stage: StageId, decided: Decided | None = None) -> list[Label]:
    """Labels valid at ``stage`` given the upstream decisions, in file order."""
    stage = StageId.parse(stage)
    decided = {StageId.parse(k): v for k, v in (decided or {}).items()}
    _check_decided(t, stage, decided)
    if stage is StageId.CATEGORY:
        return list(t.categories)
    cat = decided[StageId.CATEGORY]
    if stage is StageId.SUBCATEGORY:
        return [t.label(StageId.SUBCATEGORY, s) for s in t.children_of(cat)]
    sub = decided[StageId.SUBCATEGORY]
    return [t.label(StageId.COOKING_STYLE, s) for s in t.styles_of[(cat, sub)]]


def _resolve(t: Taxonomy, label) -> Label:
    if isinstance(label, Label):
        return t.label(label.level, label.canonical)
    for level in StageId:
        if t.has_label(level, label):
            return t.label(level, label)
    raise UnknownLabel(f"{label!r} is not in the taxonomy")


def is_valid_child(t: Taxonomy, parent, child) -> bool:
    """True iff ``child`` is in g(parent).

    A category's children are its subcategories; a subcategory's children
    are the cooking styles of its (category, subcategory) pair. Plain
    strings are resolved to the shallowest level that defines them.
    """
    p = _resolve(t, parent)
    c = _resolve(t, child)
    if c.level != p.level + 1:
        return False
    if p.level is StageId.CATEGORY:
        return t.parent_of[c.canonical] == p.canonical
    cat = t.parent_of[p.canonical]
    return c.canonical in t.styles_of[(cat, p.canonical)]


def is_valid_triple(t: Taxonomy, category: str, subcategory: str, cooking_style: str) -> bool:
    try:
        return (
            t.has_label(StageId.CATEGORY, category)
            and is_valid_child(t, t.label(StageId.CATEGORY, category), t.label(StageId.SUBCATEGORY, subcategory))
            and is_valid_child(t, t.label(StageId.SUBCATEGORY, subcategory), t.label(StageId.COOKING_STYLE, cooking_style))
        )
    except UnknownLabel:
        return False
