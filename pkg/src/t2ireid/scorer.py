"""Image/text embedding backends used to score attribute prompts.

Three backends share one small interface (``name``, ``dimension``,
``embed_image``, ``embed_text``):

* :class:`MockBackend` hashes its input into a pseudo-random unit vector.
* :class:`ScriptedBackend` embeds an image as the normalised mean of the
  prompt embeddings of its known attributes, so the best-matching prompt
  is known in advance.
* :class:`PluginBackend` talks to an external process speaking the
  line-delimited JSON protocol described in ``docs/plugin_protocol.md``.
"""

from __future__ import annotations

import base64
import hashlib
import json
import shlex
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np

from .errors import ContractError, InputError
from .ontology import AttributeOntology, PromptText, to_prompt


@dataclass(frozen=True)
class ImageRecord:
    """An image as seen by a scorer: raw bytes, an inline feature vector or a path."""

    image_id: str
    data: bytes | None = None
    features: tuple[float, ...] | None = None
    path: str | None = None

    def payload(self) -> bytes:
        if self.data is not None:
            return self.data
        if self.features is not None:
            return np.asarray(self.features, dtype="<f8").tobytes()
        if self.path is not None:
            try:
                return Path(self.path).read_bytes()
            except OSError as exc:
                raise InputError(f"image {self.image_id}: cannot read {self.path}: {exc}", self.image_id) from None
        raise InputError(f"image {self.image_id}: no payload", self.image_id)


class ScorerBackend(Protocol):
    name: str
    dimension: int

    def embed_image(self, image: ImageRecord) -> np.ndarray: ...

    def embed_text(self, prompt: PromptText | str) -> np.ndarray: ...


def _prompt_string(prompt) -> str:
    text = prompt.text if isinstance(prompt, PromptText) else prompt
    if not isinstance(text, str) or not text.strip():
        raise InputError("empty prompt")
    return text


def normalize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(vec)
    if not np.isfinite(norm) or norm == 0.0:
        raise ContractError("cannot normalise a zero or non-finite vector")
    return vec / norm


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ContractError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


class MockBackend:
    """Keyed-hash embeddings: a pure function of (seed, kind, input bytes)."""

    name = "mock"

    def __init__(self, dimension: int = 64, seed: int = 0):
        if dimension < 1:
            raise ContractError("dimension must be >= 1")
        self.dimension = int(dimension)
        self.seed = int(seed)
        self._key = hashlib.blake2b(str(self.seed).encode(), digest_size=32).digest()

    def _hash_vector(self, kind: bytes, payload: bytes) -> np.ndarray:
        digest = hashlib.blake2b(kind + b"\x00" + payload, key=self._key, digest_size=32).digest()
        rng = np.random.default_rng(np.frombuffer(digest, dtype="<u4"))
        return normalize(rng.standard_normal(self.dimension))

    def embed_image(self, image: ImageRecord) -> np.ndarray:
        payload = image.payload()
        if not payload:
            raise InputError(f"image {image.image_id}: empty payload", image.image_id)
        return self._hash_vector(b"image", payload)

    def embed_text(self, prompt) -> np.ndarray:
        return self._hash_vector(b"text", _prompt_string(prompt).encode("utf-8"))


class ScriptedBackend:
    """Backend whose image embeddings are built from known attribute phrases.

    ``truth`` maps image id -> {category: phrase surface}.  Optional
    categories absent from an image's mapping contribute their null phrase,
    so absence is scored the same way as presence.

    The ontology's prompt vectors are orthonormalised, so an image has
    cosine exactly 1/sqrt(#categories) with each of its own prompts and 0
    with every other ontology prompt.  ``dimension`` must therefore be at
    least the number of ontology prompts.
    """

    name = "scripted"

    def __init__(
        self,
        truth: Mapping[str, Mapping[str, str]],
        ontology: AttributeOntology,
        dimension: int = 512,
        seed: int = 0,
    ):
        self.text_backend = MockBackend(dimension, seed)
        self.dimension = self.text_backend.dimension
        self.ontology = ontology
        self.truth = {str(k): dict(v) for k, v in truth.items()}
        for image_id, fills in self.truth.items():
            for cat, surface in fills.items():
                if cat not in ontology:
                    raise ContractError(f"image {image_id}: unknown category {cat!r}")
                try:
                    ontology[cat].phrase(surface)
                except KeyError:
                    raise ContractError(f"image {image_id}: {surface!r} is not a {cat} phrase") from None
        prompts = []
        for category in ontology:
            phrases = list(category.phrases)
            if category.kind == "optional":
                phrases.append(category.null_phrase)
            prompts.extend(to_prompt(category, p).text for p in phrases)
        if self.dimension < len(prompts):
            raise ContractError(f"scripted backend needs dimension >= {len(prompts)} (one axis per prompt)")
        raw = np.stack([self.text_backend.embed_text(t) for t in prompts], axis=1)
        q, r = np.linalg.qr(raw)
        q = q * np.sign(np.diag(r))  # keep each axis close to its raw vector
        self._prompt_vectors = {t: q[:, i].copy() for i, t in enumerate(prompts)}

    def embed_text(self, prompt) -> np.ndarray:
        text = _prompt_string(prompt)
        vec = self._prompt_vectors.get(text)
        return vec.copy() if vec is not None else self.text_backend.embed_text(text)

    def embed_image(self, image: ImageRecord) -> np.ndarray:
        fills = self.truth.get(image.image_id)
        if fills is None:
            raise InputError(f"image {image.image_id}: no scripted attributes", image.image_id)
        acc = np.zeros(self.dimension)
        for category in self.ontology:
            if category.name in fills:
                phrase = category.phrase(fills[category.name])
            elif category.kind == "optional":
                phrase = category.null_phrase
            else:
                raise InputError(
                    f"image {image.image_id}: missing required attribute {category.name}", image.image_id
                )
            acc += self.embed_text(to_prompt(category, phrase))
        return normalize(acc)


def encode_image_payload(image: ImageRecord) -> str | list:
    if image.features is not None:
        return [float(x) for x in image.features]
    return base64.b64encode(image.payload()).decode("ascii")


def decode_image_payload(payload) -> bytes:
    if isinstance(payload, list):
        return np.asarray(payload, dtype="<f8").tobytes()
    return base64.b64decode(payload.encode("ascii"), validate=True)


class PluginBackend:
    """Client for an external embedding process over stdin/stdout.

    Each request is one JSON object per line
    ``{"kind": "image"|"text", "id": str, "payload": ...}`` and each
    response is ``{"id": str, "vector": [floats]}`` or
    ``{"id": str, "error": str}``.
    """

    name = "plugin"

    def __init__(self, command, dimension: int):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.dimension = int(dimension)
        self._lock = threading.Lock()
        self._counter = 0
        self._proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, encoding="utf-8", bufsize=1
        )

    def _request(self, kind: str, item_id: str, payload) -> np.ndarray:
        with self._lock:
            self._counter += 1
            req_id = f"{self._counter}:{item_id}"
            line = json.dumps({"kind": kind, "id": req_id, "payload": payload}, separators=(",", ":"))
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
            reply = self._proc.stdout.readline()
        if not reply:
            raise InputError(f"plugin closed the stream while embedding {item_id}", item_id)
        msg = json.loads(reply)
        if msg.get("id") != req_id:
            raise InputError(f"plugin answered {msg.get('id')!r} for request {req_id!r}", item_id)
        if "error" in msg:
            raise InputError(f"plugin error for {item_id}: {msg['error']}", item_id)
        vec = np.asarray(msg["vector"], dtype=np.float64)
        if vec.shape != (self.dimension,):
            raise ContractError(f"plugin returned dimension {vec.shape} for {item_id}, expected {self.dimension}")
        return normalize(vec)

    def embed_image(self, image: ImageRecord) -> np.ndarray:
        return self._request("image", image.image_id, encode_image_payload(image))

    def embed_text(self, prompt) -> np.ndarray:
        text = _prompt_string(prompt)
        return self._request("text", text, text)

    def close(self):
        if self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def embed_image(backend: ScorerBackend, image: ImageRecord) -> np.ndarray:
    return backend.embed_image(image)


def embed_text(backend: ScorerBackend, prompt) -> np.ndarray:
    return backend.embed_text(prompt)
