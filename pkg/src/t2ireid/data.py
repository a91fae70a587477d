"""Dataset manifests, vocabulary/tokenisation and deterministic batching.

A manifest is JSON Lines, one record per line::

    {"image_id": "p003_5", "features": [...], "caption": "...",
     "identity": 3, "fills": {...}, "split": "train", "template_id": 7}

``image_ref`` (a file path) may replace ``features``.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, ValidationError

PAD, UNK, CLS, MASK = "[PAD]", "[UNK]", "[CLS]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, MASK)
MAX_LEN = 100
SPLITS = ("train", "query", "gallery", "pretrain")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_RECORD_KEYS = {"image_id", "image_ref", "features", "caption", "identity", "fills", "split", "template_id"}


@dataclass
class PersonRecord:
    image_id: str
    caption: str = ""
    features: list[float] | None = None
    image_ref: str | None = None
    identity: int | None = None
    fills: dict[str, str] | None = None
    split: str | None = None
    template_id: int | None = None

    def __post_init__(self):
        if not self.image_id:
            raise ValidationError("record has an empty image_id")
        if self.identity is not None and (not isinstance(self.identity, int) or self.identity < 0):
            raise ValidationError(f"record {self.image_id}: identity must be a non-negative integer")

    def to_dict(self) -> dict:
        out = {"image_id": self.image_id}
        if self.features is not None:
            out["features"] = [float(x) for x in self.features]
        if self.image_ref is not None:
            out["image_ref"] = self.image_ref
        out["caption"] = self.caption
        for key in ("identity", "fills", "split", "template_id"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "PersonRecord":
        unknown = set(doc) - _RECORD_KEYS
        if unknown:
            raise ValidationError("unknown field(s): " + ", ".join(sorted(unknown)))
        if "image_id" not in doc:
            raise ValidationError("missing image_id")
        return cls(
            image_id=str(doc["image_id"]),
            caption=doc.get("caption", ""),
            features=doc.get("features"),
            image_ref=doc.get("image_ref"),
            identity=doc.get("identity"),
            fills=doc.get("fills"),
            split=doc.get("split"),
            template_id=doc.get("template_id"),
        )


@dataclass
class DatasetManifest:
    records: list[PersonRecord] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.image_id in seen:
                raise ValidationError(f"duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.split == name])

    def identities(self) -> list[int]:
        return sorted({r.identity for r in self.records if r.identity is not None})

    def check_splits(self) -> None:
        """Query/gallery identities must match and be disjoint from train identities."""
        ids = {s: {r.identity for r in self.records if r.split == s} for s in ("train", "query", "gallery")}
        if ids["query"] and not ids["query"] <= ids["gallery"]:
            raise ValidationError("query identities missing from gallery: " + str(sorted(ids["query"] - ids["gallery"])))
        overlap = ids["train"] & (ids["query"] | ids["gallery"])
        if overlap:
            raise ValidationError(f"train identities overlap evaluation identities: {sorted(overlap)[:10]}")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for rec in self.records:
            h.update(json.dumps(rec.to_dict(), sort_keys=True).encode())
        return h.hexdigest()


def load_manifest(path) -> DatasetManifest:
    records = []
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                if not isinstance(doc, dict):
                    raise ValidationError("record is not a JSON object")
                rec = PersonRecord.from_dict(doc)
            except (json.JSONDecodeError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if rec.image_id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate image_id {rec.image_id!r} (first at line {seen[rec.image_id]})")
            seen[rec.image_id] = lineno
            records.append(rec)
    return DatasetManifest(records)


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token <-> id mapping with the four special tokens at ids 0-3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValidationError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValidationError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, captions, min_count: int = 1) -> "Vocabulary":
        counts = Counter()
        for text in captions:
            counts.update(split_words(text))
        words = sorted(w for w, c in counts.items() if c >= min_count and w not in SPECIAL_TOKENS)
        return cls(list(SPECIAL_TOKENS) + words)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    pad_id = property(lambda self: self.index[PAD])
    unk_id = property(lambda self: self.index[UNK])
    cls_id = property(lambda self: self.index[CLS])
    mask_id = property(lambda self: self.index[MASK])

    def encode_word(self, word: str) -> int:
        return self.index.get(word, self.unk_id)

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def tokenize(text: str, vocabulary: Vocabulary, length: int = MAX_LEN) -> np.ndarray:
    """Lower-case word/punctuation ids, ``[CLS]`` first, padded or truncated to ``length``."""
    ids = [vocabulary.cls_id] + [vocabulary.encode_word(w) for w in split_words(text)]
    ids = ids[:length]
    ids += [vocabulary.pad_id] * (length - len(ids))
    return np.asarray(ids, dtype=np.int64)


def tokenize_batch(texts, vocabulary: Vocabulary, length: int = MAX_LEN) -> np.ndarray:
    return np.stack([tokenize(t, vocabulary, length) for t in texts])


def batch_iter(records: Sequence, batch_size: int, seed: int, epoch: int = 0, drop_last: bool = True) -> Iterator[list]:
    """Yield shuffled batches for one epoch.

    The permutation depends only on ``(seed, epoch)``.  With ``drop_last``
    (contrastive mode) the final short batch is dropped so every batch
    supplies a full set of in-batch negatives.
    """
    n = len(records)
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    if batch_size > n:
        raise ValidationError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        yield [records[i] for i in order[start : start + batch_size]]


def load_image_patches(path, size=(32, 16), patch: int = 8, flip: bool = False) -> np.ndarray:
    """Decode an image file into a (num_patches, patch*patch*3) array in [0, 1]."""
    from PIL import Image

    h, w = size
    if h % patch or w % patch:
        raise ContractError(f"image size {size} is not a multiple of patch {patch}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB").resize((w, h)), dtype=np.float64) / 255.0
    if flip:
        arr = arr[:, ::-1]
    grid = arr.reshape(h // patch, patch, w // patch, patch, 3).transpose(0, 2, 1, 3, 4)
    return grid.reshape(-1, patch * patch * 3)
