"""Pseudo-caption generation: attribute selection, template filling, statistics."""

from __future__ import annotations

import hashlib
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, GenerationError, T2IError, ValidationError
from .ontology import (
    OPTIONAL_CATEGORIES,
    AttributeCategory,
    AttributeOntology,
    AttributePhrase,
    to_prompt,
)
from .scorer import ImageRecord, ScorerBackend, normalize

log = logging.getLogger(__name__)

SLOT_RE = re.compile(r"\{(\w+)\}")


@dataclass(frozen=True)
class GenerationConfig:
    threshold: float = 0.9
    scale: float = 100.0
    synonym_rate: float = 0.5
    max_templates: int | None = None  # keep only the first N templates (data-scale ablation)

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not self.scale > 0:
            raise ValidationError(f"scale must be positive, got {self.scale}")
        if not 0.0 <= self.synonym_rate <= 1.0:
            raise ValidationError(f"synonym_rate must lie in [0, 1], got {self.synonym_rate}")
        if self.max_templates is not None and self.max_templates < 1:
            raise ValidationError("max_templates must be >= 1")


@dataclass
class AttributeSelection:
    required: dict[str, AttributePhrase]
    optional: dict[str, AttributePhrase] = field(default_factory=dict)
    scores: dict[str, dict] = field(default_factory=dict)
    image_id: str | None = None

    def covers(self, slots: Iterable[str]) -> bool:
        return all(s in self.required or s in self.optional for s in slots)

    def phrase_for(self, category: str) -> AttributePhrase:
        if category in self.required:
            return self.required[category]
        return self.optional[category]


@dataclass(frozen=True)
class CaptionTemplate:
    id: int
    pattern: str
    slots: tuple[str, ...]

    @classmethod
    def parse(cls, template_id: int, pattern: str, known: Iterable[str] | None = None) -> "CaptionTemplate":
        slots = tuple(dict.fromkeys(SLOT_RE.findall(pattern)))
        if known is not None:
            known = set(known)
            bad = [s for s in slots if s not in known]
            if bad:
                raise ValidationError(f"template {template_id}: unknown slot(s) " + ", ".join(bad))
        leftover = SLOT_RE.sub("", pattern)
        if "{" in leftover or "}" in leftover:
            raise ValidationError(f"template {template_id}: malformed placeholder in {pattern!r}")
        return cls(int(template_id), pattern, slots)


@dataclass(frozen=True)
class PseudoCaption:
    text: str
    template_id: int
    fills: dict[str, str]
    image_id: str | None = None
    pattern: str = ""
    canonical: dict[str, str] | None = None  # surfaces before synonym substitution


@dataclass
class CorpusStats:
    caption_count: int
    counts: dict[str, int]
    frequencies: dict[str, float]  # per caption
    shares: dict[str, float]  # per optional occurrence
    total_optional: int
    unknown: int = 0

    def as_rows(self) -> list[dict]:
        return [
            {
                "attribute": name,
                "count": self.counts[name],
                "frequency": self.frequencies[name],
                "share": self.shares[name],
            }
            for name in self.counts
        ]


def softmax(scores: Sequence[float], scale: float = 1.0) -> np.ndarray:
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ContractError("softmax needs a non-empty 1-d score sequence")
    if not scale > 0:
        raise ContractError(f"scale must be positive, got {scale}")
    if not np.all(np.isfinite(x)):
        raise ContractError("softmax scores must be finite")
    z = scale * x
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


class PromptBank:
    """Prompt embeddings for every phrase of an ontology, computed once per backend.

    Optional categories get an extra trailing row for their null phrase.
    """

    def __init__(self, ontology: AttributeOntology, backend: ScorerBackend):
        self.ontology = ontology
        self.backend = backend
        self.matrices: dict[str, np.ndarray] = {}
        for category in ontology:
            phrases = list(category.phrases)
            if category.kind == "optional":
                phrases.append(category.null_phrase)
            self.matrices[category.name] = np.stack(
                [backend.embed_text(to_prompt(category, p)) for p in phrases]
            )

    def similarities(self, image_vec, category: AttributeCategory) -> np.ndarray:
        mat = self.matrices.get(category.name)
        if mat is None:
            mat = PromptBank._category_matrix(category, self.backend)
        return mat @ normalize(image_vec)

    @staticmethod
    def _category_matrix(category, backend):
        phrases = list(category.phrases)
        if category.kind == "optional":
            phrases.append(category.null_phrase)
        return np.stack([backend.embed_text(to_prompt(category, p)) for p in phrases])


def _similarities(image_vec, category, backend, bank):
    if bank is not None:
        return bank.similarities(image_vec, category)
    return PromptBank._category_matrix(category, backend) @ normalize(image_vec)


def select_required(image_vec, category: AttributeCategory, ontology=None, backend=None, bank=None):
    """Most similar phrase of a required category; ties go to the earliest phrase."""
    phrase, _ = _score_required(image_vec, category, backend, bank)
    return phrase


def _score_required(image_vec, category, backend, bank):
    if category.kind != "required":
        raise ContractError(f"{category.name} is not a required category")
    if not category.phrases:
        raise ContractError(f"{category.name} has no phrases")
    sims = _similarities(image_vec, category, backend, bank)
    best = int(np.argmax(sims))
    return category.phrases[best], {"similarities": sims.tolist(), "chosen": category.phrases[best].surface}


def select_optional(
    image_vec,
    category: AttributeCategory,
    ontology=None,
    backend=None,
    threshold: float = 0.9,
    scale: float = 100.0,
    bank=None,
):
    """Gated choice for an optional category.

    Softmax runs over the category's phrases plus its null phrase.  The
    winner is returned only if it is a real phrase with probability strictly
    above ``threshold``; otherwise ``None``.
    """
    phrase, _ = _score_optional(image_vec, category, backend, threshold, scale, bank)
    return phrase


def _score_optional(image_vec, category, backend, threshold, scale, bank):
    if category.kind != "optional":
        raise ContractError(f"{category.name} is not an optional category")
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    sims = _similarities(image_vec, category, backend, bank)
    probs = softmax(sims, scale)
    best = int(np.argmax(probs))
    is_null = best == len(category.phrases)
    chosen = None
    if not is_null and probs[best] > threshold:
        chosen = category.phrases[best]
    record = {
        "similarities": sims.tolist(),
        "probabilities": probs.tolist(),
        "argmax": best,
        "probability": float(probs[best]),
        "chosen": chosen.surface if chosen else None,
    }
    return chosen, record


def select_attributes(image_vec, ontology, backend, config: GenerationConfig, bank=None, image_id=None):
    bank = bank if bank is not None else PromptBank(ontology, backend)
    selection = AttributeSelection(required={}, image_id=image_id)
    for category in ontology.required:
        phrase, rec = _score_required(image_vec, category, backend, bank)
        selection.required[category.name] = phrase
        selection.scores[category.name] = rec
    for category in ontology.optional:
        phrase, rec = _score_optional(image_vec, category, backend, config.threshold, config.scale, bank)
        if phrase is not None:
            selection.optional[category.name] = phrase
        selection.scores[category.name] = rec
    return selection


def render(pattern: str, fills: Mapping[str, str]) -> str:
    def sub(m):
        return fills[m.group(1)]

    return SLOT_RE.sub(sub, pattern)


def fill_template(template: CaptionTemplate, selection: AttributeSelection, rng=None) -> PseudoCaption:
    missing = [s for s in template.slots if not selection.covers([s])]
    if missing:
        raise ContractError(
            f"template {template.id} needs unselected attribute(s): " + ", ".join(missing)
        )
    fills = {s: selection.phrase_for(s).surface for s in template.slots}
    return PseudoCaption(
        text=render(template.pattern, fills),
        template_id=template.id,
        fills=fills,
        image_id=selection.image_id,
        pattern=template.pattern,
        canonical=dict(fills),
    )


def extract_slots(pattern: str, text: str) -> dict[str, str] | None:
    """Recover slot fills from a rendered caption; None if it does not match."""
    parts = []
    seen = set()
    pos = 0
    for m in SLOT_RE.finditer(pattern):
        parts.append(re.escape(pattern[pos : m.start()]))
        name = m.group(1)
        parts.append(f"(?P={name})" if name in seen else f"(?P<{name}>.+?)")
        seen.add(name)
        pos = m.end()
    parts.append(re.escape(pattern[pos:]))
    m = re.fullmatch("".join(parts), text, flags=re.DOTALL)
    return m.groupdict() if m else None


def choose_template(templates: Sequence[CaptionTemplate], selection: AttributeSelection, rng) -> CaptionTemplate:
    covered = [t for t in templates if selection.covers(t.slots)]
    if not covered:
        raise GenerationError(
            f"no template covers the attributes selected for image {selection.image_id}",
            image_id=selection.image_id,
            stage="combine",
        )
    return covered[int(rng.integers(len(covered)))]


def substitute_synonyms(caption: PseudoCaption, ontology: AttributeOntology, rng, rate: float = 0.5) -> PseudoCaption:
    canonical = caption.canonical if caption.canonical is not None else caption.fills
    fills = {}
    for slot, surface in canonical.items():
        draw = rng.random()  # drawn for every slot so streams stay aligned
        synonyms = ()
        if slot in ontology:
            try:
                synonyms = ontology[slot].phrase(surface).synonyms
            except KeyError:
                synonyms = ()
        if synonyms and draw < rate:
            fills[slot] = synonyms[int(rng.integers(len(synonyms)))]
        else:
            fills[slot] = caption.fills[slot]
    return PseudoCaption(
        text=render(caption.pattern, fills) if caption.pattern else caption.text,
        template_id=caption.template_id,
        fills=fills,
        image_id=caption.image_id,
        pattern=caption.pattern,
        canonical=dict(canonical),
    )


def derive_seed(seed: int, image_id: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}:{image_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def generate_caption(image: ImageRecord, ontology, templates, backend, config: GenerationConfig, rng, bank=None) -> PseudoCaption:
    """Run the full selection and combination pipeline for one image."""
    if config.max_templates is not None:
        templates = list(templates)[: config.max_templates]
    try:
        image_vec = backend.embed_image(image)
    except T2IError as exc:
        raise GenerationError(f"[embed] {exc}", image.image_id, "embed") from exc
    try:
        selection = select_attributes(image_vec, ontology, backend, config, bank, image.image_id)
    except T2IError as exc:
        raise GenerationError(f"[conquer] image {image.image_id}: {exc}", image.image_id, "conquer") from exc
    try:
        template = choose_template(templates, selection, rng)
        caption = fill_template(template, selection, rng)
        caption = substitute_synonyms(caption, ontology, rng, config.synonym_rate)
    except T2IError as exc:
        raise GenerationError(f"[combine] image {image.image_id}: {exc}", image.image_id, "combine") from exc
    return caption


def generate_corpus(images: Sequence[ImageRecord], ontology, templates, backend, config: GenerationConfig, seed: int, workers: int = 1) -> list[PseudoCaption]:
    """Caption every image; output order follows input order regardless of ``workers``."""
    bank = PromptBank(ontology, backend)

    def one(image):
        rng = np.random.default_rng(derive_seed(seed, image.image_id))
        return generate_caption(image, ontology, templates, backend, config, rng, bank)

    if workers <= 1:
        return [one(im) for im in images]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, images))


def load_templates(path, ontology: AttributeOntology | None = None) -> list[CaptionTemplate]:
    known = ontology.category_names if ontology is not None else None
    templates = []
    ids = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'id<TAB>pattern'")
        raw_id, pattern = line.split("\t", 1)
        try:
            tid = int(raw_id)
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: template id {raw_id!r} is not an integer") from None
        if tid in ids:
            raise ValidationError(f"{path}:{lineno}: duplicate template id {tid}")
        ids.add(tid)
        try:
            templates.append(CaptionTemplate.parse(tid, pattern, known))
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
    if not templates:
        raise ValidationError(f"{path}: no templates")
    return templates


def save_templates(templates: Sequence[CaptionTemplate], path) -> None:
    Path(path).write_text("".join(f"{t.id}\t{t.pattern}\n" for t in templates), encoding="utf-8")


def default_templates_path(alt: bool = False) -> Path:
    name = "templates_alt.tsv" if alt else "templates.tsv"
    return Path(str(resources.files("t2ireid") / "resources" / name))


def corpus_stats(records) -> CorpusStats:
    """Tally optional-attribute mentions across captioned records."""
    counts = {name: 0 for name in OPTIONAL_CATEGORIES}
    captions = 0
    unknown = 0
    for rec in records:
        captions += 1
        fills = getattr(rec, "fills", None)
        if fills is None:
            unknown += 1
            continue
        for name in fills:
            if name in counts:
                counts[name] += 1
    total = sum(counts.values())
    freqs = {k: (v / captions if captions else 0.0) for k, v in counts.items()}
    shares = {k: (v / total if total else 0.0) for k, v in counts.items()}
    if unknown:
        log.warning("%d of %d records carry no fills metadata", unknown, captions)
    return CorpusStats(captions, counts, freqs, shares, total, unknown)
