"""Text-to-image retrieval and Rank-k accuracy."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import DatasetManifest, tokenize_batch
from .errors import ContractError, EvaluationError
from .finetune import retrieval_model_from_checkpoint
from .pretrain import config_hash, record_images

DEFAULT_KS = (1, 5, 10)


def retrieve(query, gallery) -> np.ndarray:
    """Gallery indices by descending cosine similarity; ties go to the lower index."""
    q = np.asarray(query, dtype=np.float64)
    g = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if g.shape[0] == 0:
        raise ContractError("empty gallery")
    if q.ndim != 1 or g.shape[1] != q.shape[0]:
        raise ContractError(f"dimension mismatch: query {q.shape} vs gallery {g.shape}")
    sims = (g / np.linalg.norm(g, axis=1, keepdims=True)) @ (q / np.linalg.norm(q))
    return np.argsort(-sims, kind="stable")


def retrieve_all(queries, gallery) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise ContractError("empty gallery")
    if q.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ContractError(f"dimension mismatch: queries {q.shape} vs gallery {g.shape}")
    sims = (q / np.linalg.norm(q, axis=1, keepdims=True)) @ (g / np.linalg.norm(g, axis=1, keepdims=True)).T
    return np.argsort(-sims, axis=1, kind="stable")


@dataclass
class RetrievalRun:
    query_labels: np.ndarray
    gallery_labels: np.ndarray
    ranked: np.ndarray  # (n_queries, n_gallery)
    query_ids: list[str] = field(default_factory=list)

    @classmethod
    def from_embeddings(cls, queries, gallery, query_labels, gallery_labels, query_ids=None):
        return cls(
            np.asarray(query_labels), np.asarray(gallery_labels), retrieve_all(queries, gallery),
            list(query_ids) if query_ids is not None else [],
        )


def first_match_ranks(run: RetrievalRun) -> np.ndarray:
    """1-based rank of the first correct gallery item for every query."""
    present = set(run.gallery_labels.tolist())
    for i, lab in enumerate(run.query_labels.tolist()):
        if lab not in present:
            name = run.query_ids[i] if run.query_ids else f"#{i}"
            raise EvaluationError(f"query {name}: identity {lab} has no gallery image")
    hits = run.gallery_labels[run.ranked] == run.query_labels[:, None]
    return hits.argmax(axis=1) + 1


def rank_k(run: RetrievalRun, k: int) -> float:
    """Fraction of queries with a correct match among the top ``k`` results."""
    if k < 1:
        raise ContractError("k must be >= 1")
    ranks = first_match_ranks(run)
    return float(np.mean(ranks <= k)) if len(ranks) else 0.0


@dataclass
class RankKReport:
    rank1: float
    rank5: float
    rank10: float
    n_queries: int
    config_hash: str = ""
    domain: str = ""

    def as_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        header = f"{'metric':<8}{'value':>10}"
        rows = [
            f"{'Rank-1':<8}{100 * self.rank1:>9.2f}%",
            f"{'Rank-5':<8}{100 * self.rank5:>9.2f}%",
            f"{'Rank-10':<8}{100 * self.rank10:>9.2f}%",
            f"{'queries':<8}{self.n_queries:>10d}",
        ]
        return "\n".join([header, "-" * len(header), *rows])

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def report_from_run(run: RetrievalRun, cfg_hash: str = "", domain: str = "") -> RankKReport:
    ranks = first_match_ranks(run)
    acc = {k: float(np.mean(ranks <= k)) for k in DEFAULT_KS}
    return RankKReport(acc[1], acc[5], acc[10], int(len(ranks)), cfg_hash, domain)


@torch.no_grad()
def embed_split(model, vocab, records, enc_cfg, modality: str, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        if modality == "text":
            ids = torch.from_numpy(tokenize_batch([r.caption for r in chunk], vocab, enc_cfg.max_len))
            out.append(model.embed_texts(ids).double().numpy())
        else:
            out.append(model.embed_images(record_images(chunk, enc_cfg)).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, enc_cfg.embed_dim))


def evaluate(checkpoint: dict, manifest: DatasetManifest, domain: str = "") -> RankKReport:
    """Embed query captions and gallery images with the checkpoint and score Rank-1/5/10.

    A checkpoint fine-tuned with the prototype head retrieves with the
    fused global + unified features; otherwise the max-pooled globals are used.
    """
    queries = [r for r in manifest.records if r.split == "query"]
    gallery = [r for r in manifest.records if r.split == "gallery"]
    if not queries or not gallery:
        raise EvaluationError("manifest needs both 'query' and 'gallery' records")
    for r in queries + gallery:
        if r.identity is None:
            raise EvaluationError(f"record {r.image_id} has no identity label")
    model, vocab = retrieval_model_from_checkpoint(checkpoint)
    enc_cfg = model.encoder.cfg if hasattr(model, "encoder") else model.cfg
    q = embed_split(model, vocab, queries, enc_cfg, "text")
    g = embed_split(model, vocab, gallery, enc_cfg, "image")
    run = RetrievalRun.from_embeddings(
        q, g, [r.identity for r in queries], [r.identity for r in gallery], [r.image_id for r in queries]
    )
    h = config_hash({"checkpoint": checkpoint.get("config_hash", ""), "manifest": manifest.content_hash()})
    return report_from_run(run, h, domain)


def cross_domain_evaluate(checkpoint: dict, manifest_b: DatasetManifest) -> RankKReport:
    """Evaluate a checkpoint on a manifest from a different domain.

    Words unseen by the checkpoint's vocabulary map to [UNK].
    """
    return evaluate(checkpoint, manifest_b, domain="cross")

