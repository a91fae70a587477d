"""Synthetic feature-vector benchmark for desk-scale runs.

Every toy person has a fixed set of attribute phrases.  An image is the
sum of per-phrase appearance vectors, a per-person offset and per-image
noise, so appearance is recoverable from features without any image
decoder.  Captions come from the regular generation pipeline driven by
the scripted scorer, which knows each image's attributes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetManifest, PersonRecord
from .generator import GenerationConfig, default_templates_path, generate_corpus, load_templates
from .ontology import REQUIRED_CATEGORIES, AttributeOntology, default_ontology
from .scorer import ImageRecord, ScriptedBackend

# chance that a toy person carries each optional attribute
OPTIONAL_RATES = {
    "bag": 0.38,
    "cellphone": 0.2,
    "glasses": 0.2,
    "hat": 0.2,
    "smoke": 0.03,
    "umbrella": 0.03,
    "gloves": 0.02,
    "vehicle": 0.02,
}


@dataclass
class ToyImage:
    image_id: str
    features: np.ndarray
    attributes: dict[str, str]
    identity: int | None
    split: str


def _sample_person(ontology, rng):
    attrs = {c.name: c.phrases[int(rng.integers(len(c.phrases)))].surface for c in ontology.required}
    for c in ontology.optional:
        if rng.random() < OPTIONAL_RATES.get(c.name, 0.05):
            attrs[c.name] = c.phrases[int(rng.integers(len(c.phrases)))].surface
    return attrs


def _distinct(attrs, others, min_diff=2):
    for o in others:
        diff = sum(attrs[k] != o[k] for k in attrs if k in REQUIRED_CATEGORIES)
        if diff < min_diff:
            return False
    return True


def build_toy_world(
    seed: int = 0,
    n_train_ids: int = 32,
    n_eval_ids: int = 32,
    images_per_id: int = 8,
    n_pretrain: int = 512,
    feature_dim: int = 64,
    noise: float = 0.3,
    ontology: AttributeOntology | None = None,
) -> list[ToyImage]:
    """Sample toy people and their feature-vector images.

    Splits: ``pretrain`` (unlabelled, one image per person), ``train``, and
    for the held-out people ``gallery`` / ``query`` (half their images each).
    Required attributes of any two labelled people differ in >= 2 categories.
    """
    ontology = ontology or default_ontology()
    rng = np.random.default_rng([seed, 7])
    appearance = {
        (c.name, p.surface): rng.standard_normal(feature_dim) / np.sqrt(feature_dim) * 2.0
        for c in ontology
        for p in c.phrases
    }

    def render(attrs, offset):
        x = offset + noise * rng.standard_normal(feature_dim) / np.sqrt(feature_dim) * 2.0
        for cat, surface in attrs.items():
            x = x + appearance[(cat, surface)]
        return x

    people = []
    while len(people) < n_train_ids + n_eval_ids:
        attrs = _sample_person(ontology, rng)
        if _distinct(attrs, people):
            people.append(attrs)

    images = []
    for pid, attrs in enumerate(people):
        offset = noise * rng.standard_normal(feature_dim) / np.sqrt(feature_dim) * 2.0
        held_out = pid >= n_train_ids
        for j in range(images_per_id):
            if held_out:
                split = "gallery" if j < images_per_id // 2 else "query"
            else:
                split = "train"
            images.append(ToyImage(f"p{pid:03d}_{j}", render(attrs, offset), dict(attrs), pid, split))
    for j in range(n_pretrain):
        attrs = _sample_person(ontology, rng)
        images.append(ToyImage(f"u{j:05d}", render(attrs, 0.0), attrs, None, "pretrain"))
    return images


def caption_toy_world(images, seed=0, templates=None, ontology=None, config=None, workers=1) -> DatasetManifest:
    """Run pseudo-caption generation over toy images with the scripted scorer."""
    ontology = ontology or default_ontology()
    templates = templates or load_templates(default_templates_path(), ontology)
    config = config or GenerationConfig()
    backend = ScriptedBackend({im.image_id: im.attributes for im in images}, ontology, seed=seed)
    records = [ImageRecord(im.image_id, features=tuple(float(x) for x in im.features)) for im in images]
    captions = generate_corpus(records, ontology, templates, backend, config, seed, workers)
    return DatasetManifest([
        PersonRecord(
            image_id=im.image_id,
            caption=cap.text,
            features=[float(x) for x in im.features],
            identity=im.identity,
            fills=cap.fills,
            split=im.split,
            template_id=cap.template_id,
        )
        for im, cap in zip(images, captions)
    ])


def toy_benchmark(seed: int = 0, alt_templates: bool = False, **world_kwargs) -> DatasetManifest:
    ontology = default_ontology()
    templates = load_templates(default_templates_path(alt_templates), ontology)
    return caption_toy_world(build_toy_world(seed, ontology=ontology, **world_kwargs), seed, templates, ontology)
