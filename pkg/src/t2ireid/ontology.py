"""Attribute vocabulary for pedestrian descriptions and prompt construction.

The ontology file is JSON with two top-level keys, ``required`` and
``optional``.  Each holds a list of categories::

    {"name": "hair_length",
     "phrases": [{"surface": "long hair", "synonyms": ["lengthy hair"]}, ...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator

from .errors import ContractError, ValidationError

REQUIRED_CATEGORIES = (
    "age",
    "gender",
    "upper_clothes",
    "lower_clothes",
    "action",
    "hair_length",
)
OPTIONAL_CATEGORIES = (
    "bag",
    "glasses",
    "smoke",
    "hat",
    "cellphone",
    "umbrella",
    "gloves",
    "vehicle",
)

# category -> prompt pattern; anything not listed uses the optional default
PROMPT_PATTERNS = {
    "age": "A photo of a {phrase}",
    "gender": "A photo of a {phrase}",
    "upper_clothes": "A photo of a person wearing {phrase}",
    "lower_clothes": "A photo of a person wearing {phrase}",
    "action": "A photo of a person {phrase}",
    "hair_length": "A photo of a person with {phrase}",
}
OPTIONAL_PROMPT_PATTERN = "A photo of a person with {phrase}"


@dataclass(frozen=True)
class AttributePhrase:
    surface: str
    synonyms: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.surface or not self.surface.strip():
            raise ValidationError("phrase surface must be non-empty")
        if len(set(self.synonyms)) != len(self.synonyms):
            raise ValidationError(f"duplicate synonyms for phrase {self.surface!r}")
        if self.surface in self.synonyms:
            raise ValidationError(f"phrase {self.surface!r} lists itself as a synonym")

    def to_dict(self) -> dict:
        return {"surface": self.surface, "synonyms": list(self.synonyms)}


@dataclass(frozen=True)
class AttributeCategory:
    name: str
    kind: str  # "required" | "optional"
    phrases: tuple[AttributePhrase, ...]

    def __post_init__(self):
        if self.kind not in ("required", "optional"):
            raise ValidationError(f"category {self.name!r}: unknown kind {self.kind!r}")
        if not self.phrases:
            raise ValidationError(f"category {self.name!r} has no phrases")
        seen = set()
        dupes = []
        for p in self.phrases:
            if p.surface in seen:
                dupes.append(p.surface)
            seen.add(p.surface)
        if dupes:
            raise ValidationError(
                f"category {self.name!r}: duplicate phrase surface(s): "
                + ", ".join(repr(d) for d in dupes)
            )

    @property
    def null_phrase(self) -> AttributePhrase | None:
        """Absence alternative used when gating optional attributes."""
        if self.kind != "optional":
            return None
        return AttributePhrase(f"no {self.name}")

    def index_of(self, surface: str) -> int:
        for i, p in enumerate(self.phrases):
            if p.surface == surface:
                return i
        raise KeyError(surface)

    def phrase(self, surface: str) -> AttributePhrase:
        return self.phrases[self.index_of(surface)]

    def to_dict(self) -> dict:
        return {"name": self.name, "phrases": [p.to_dict() for p in self.phrases]}


@dataclass(frozen=True)
class PromptText:
    text: str

    def __str__(self):
        return self.text


@dataclass(frozen=True)
class AttributeOntology:
    required: tuple[AttributeCategory, ...]
    optional: tuple[AttributeCategory, ...]
    _by_name: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        names = [c.name for c in self.required]
        missing = [n for n in REQUIRED_CATEGORIES if n not in names]
        if missing:
            raise ValidationError("missing required category: " + ", ".join(missing))
        extra = [n for n in names if n not in REQUIRED_CATEGORIES]
        if extra:
            raise ValidationError("unknown required category: " + ", ".join(extra))
        onames = [c.name for c in self.optional]
        missing = [n for n in OPTIONAL_CATEGORIES if n not in onames]
        if missing:
            raise ValidationError("missing optional category: " + ", ".join(missing))
        extra = [n for n in onames if n not in OPTIONAL_CATEGORIES]
        if extra:
            raise ValidationError("unknown optional category: " + ", ".join(extra))
        all_names = names + onames
        dupes = sorted({n for n in all_names if all_names.count(n) > 1})
        if dupes:
            raise ValidationError("duplicate category: " + ", ".join(dupes))
        for c in self.required:
            if c.kind != "required":
                raise ValidationError(f"category {c.name!r} listed as required but has kind {c.kind!r}")
        for c in self.optional:
            if c.kind != "optional":
                raise ValidationError(f"category {c.name!r} listed as optional but has kind {c.kind!r}")
        object.__setattr__(self, "_by_name", {c.name: c for c in self.required + self.optional})

    def __iter__(self) -> Iterator[AttributeCategory]:
        yield from self.required
        yield from self.optional

    def __len__(self):
        return len(self.required) + len(self.optional)

    def __getitem__(self, name: str) -> AttributeCategory:
        return self._by_name[name]

    def __contains__(self, name) -> bool:
        return name in self._by_name

    @property
    def category_names(self) -> list[str]:
        return [c.name for c in self]

    def to_dict(self) -> dict:
        return {
            "required": [c.to_dict() for c in self.required],
            "optional": [c.to_dict() for c in self.optional],
        }

    @classmethod
    def from_dict(cls, doc) -> "AttributeOntology":
        if not isinstance(doc, dict):
            raise ValidationError("ontology document must be an object")
        unknown = set(doc) - {"required", "optional"}
        if unknown:
            raise ValidationError("unknown top-level key(s): " + ", ".join(sorted(unknown)))
        for key in ("required", "optional"):
            if key not in doc:
                raise ValidationError(f"missing top-level key {key!r}")
        required = tuple(_category_from_dict(c, "required") for c in doc["required"])
        optional = tuple(_category_from_dict(c, "optional") for c in doc["optional"])
        return cls(required, optional)


def _category_from_dict(doc, kind) -> AttributeCategory:
    if not isinstance(doc, dict) or "name" not in doc or "phrases" not in doc:
        raise ValidationError(f"malformed {kind} category entry: {doc!r}")
    name = doc["name"]
    phrases = []
    for p in doc["phrases"]:
        if isinstance(p, str):
            p = {"surface": p}
        if not isinstance(p, dict) or "surface" not in p:
            raise ValidationError(f"category {name!r}: malformed phrase entry {p!r}")
        try:
            phrases.append(AttributePhrase(p["surface"], tuple(p.get("synonyms", ()))))
        except ValidationError as exc:
            raise ValidationError(f"category {name!r}: {exc}") from None
    return AttributeCategory(name, kind, tuple(phrases))


def load_ontology(path) -> AttributeOntology:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: parse error: {exc}") from None
    try:
        return AttributeOntology.from_dict(doc)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def save_ontology(ontology: AttributeOntology, path) -> None:
    Path(path).write_text(
        json.dumps(ontology.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def default_ontology_path() -> Path:
    return Path(str(resources.files("t2ireid") / "resources" / "ontology.json"))


def default_ontology() -> AttributeOntology:
    return load_ontology(default_ontology_path())


def to_prompt(category: AttributeCategory, phrase: AttributePhrase) -> PromptText:
    """Render the scorer prompt for one phrase of a category.

    The category's null phrase is accepted too, so absence can be scored.
    """
    if phrase not in category.phrases and phrase != category.null_phrase:
        raise ContractError(f"phrase {phrase.surface!r} does not belong to category {category.name!r}")
    pattern = PROMPT_PATTERNS.get(category.name, OPTIONAL_PROMPT_PATTERN)
    return PromptText(pattern.replace("{phrase}", phrase.surface))
