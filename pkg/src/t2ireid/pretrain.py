"""Dual-encoder pre-training with symmetric contrastive and masked-LM objectives."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import MAX_LEN, DatasetManifest, Vocabulary, batch_iter, load_image_patches, tokenize_batch
from .errors import ContractError, NumericError, ValidationError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "t2ireid-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    vocab_size: int
    visual_input: str = "features"  # "features" (one vector per image) or "patches"
    visual_in_dim: int = 64
    visual_patches: int = 1
    visual_layers: int = 2
    visual_width: int = 64
    visual_heads: int = 4
    text_layers: int = 2
    text_width: int = 64
    text_heads: int = 4
    max_len: int = MAX_LEN
    embed_dim: int = 64
    mode: str = "transformer"  # or "linear": no attention blocks

    def __post_init__(self):
        if self.visual_input not in ("features", "patches"):
            raise ValidationError(f"visual_input must be 'features' or 'patches', got {self.visual_input!r}")
        if self.mode not in ("transformer", "linear"):
            raise ValidationError(f"mode must be 'transformer' or 'linear', got {self.mode!r}")
        if self.visual_input == "features" and self.visual_patches != 1:
            raise ValidationError("feature-vector input implies visual_patches = 1")
        for name in (
            "vocab_size", "visual_in_dim", "visual_patches", "visual_layers", "visual_width",
            "visual_heads", "text_layers", "text_width", "text_heads", "max_len", "embed_dim",
        ):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")


def _blocks(width, heads, layers, mode):
    if mode == "linear":
        return nn.ModuleList()
    return nn.ModuleList(
        nn.TransformerEncoderLayer(
            width, heads, dim_feedforward=2 * width, dropout=0.0,
            activation="gelu", batch_first=True, norm_first=True,
        )
        for _ in range(layers)
    )


class VisualEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.visual_in_dim, cfg.visual_width)
        self.pos = nn.Parameter(torch.zeros(cfg.visual_patches, cfg.visual_width))
        self.blocks = _blocks(cfg.visual_width, cfg.visual_heads, cfg.visual_layers, cfg.mode)

    def forward(self, x):
        if x.ndim == 2:
            x = x.unsqueeze(1)
        if x.shape[1:] != (self.cfg.visual_patches, self.cfg.visual_in_dim):
            raise ContractError(
                f"visual input shape {tuple(x.shape)} does not match "
                f"(N, {self.cfg.visual_patches}, {self.cfg.visual_in_dim})"
            )
        h = self.embed(x) + self.pos
        for blk in self.blocks:
            h = blk(h)
        return h


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, pad_id: int = 0):
        super().__init__()
        self.cfg = cfg
        self.pad_id = pad_id
        self.embed = nn.Embedding(cfg.vocab_size, cfg.text_width)
        self.pos = nn.Parameter(torch.zeros(cfg.max_len, cfg.text_width))
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = _blocks(cfg.text_width, cfg.text_heads, cfg.text_layers, cfg.mode)

    def forward(self, ids):
        if ids.ndim != 2 or ids.shape[1] > self.cfg.max_len:
            raise ContractError(f"token ids of shape {tuple(ids.shape)} do not fit max_len {self.cfg.max_len}")
        if int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0:
            raise ContractError("token id outside the vocabulary")
        pad = ids == self.pad_id
        h = self.embed(ids) + self.pos[: ids.shape[1]]
        for blk in self.blocks:
            h = blk(h, src_key_padding_mask=pad)
        return h


class TokenProjection(nn.Module):
    """1x1 convolution over the token axis: (N, L, width) -> (N, L, d)."""

    def __init__(self, width, dim):
        super().__init__()
        self.conv = nn.Conv1d(width, dim, kernel_size=1)

    def forward(self, tokens):
        return self.conv(tokens.transpose(1, 2)).transpose(1, 2)


def max_pool(tokens, mask=None):
    """Element-wise max over valid tokens.  ``mask`` is True where a token is kept."""
    if tokens.shape[1] == 0:
        raise ContractError("cannot pool an empty token sequence")
    if mask is None:
        return tokens.max(dim=1).values
    if not bool(mask.any(dim=1).all()):
        raise ContractError("cannot pool a sequence made only of padding")
    filled = tokens.masked_fill(~mask.unsqueeze(-1), float("-inf"))
    return filled.max(dim=1).values


def project_and_pool(tokens, projection: TokenProjection, mask=None):
    return max_pool(projection(tokens), mask)


class DualEncoder(nn.Module):
    """Visual and textual towers with per-token projection and max-pooled globals."""

    def __init__(self, cfg: EncoderConfig, pad_id: int = 0, learnable_tau: bool = False, tau: float = 1.0):
        super().__init__()
        self.cfg = cfg
        self.pad_id = pad_id
        self.visual = VisualEncoder(cfg)
        self.text = TextEncoder(cfg, pad_id)
        self.visual_proj = TokenProjection(cfg.visual_width, cfg.embed_dim)
        self.text_proj = TokenProjection(cfg.text_width, cfg.embed_dim)
        self.mlm_head = nn.Linear(cfg.text_width, cfg.vocab_size)
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau))) if learnable_tau else None

    def tau(self, default: float = 1.0):
        return self.log_tau.exp() if self.log_tau is not None else default

    def image_tokens(self, images):
        return self.visual_proj(self.visual(images))

    def text_tokens(self, ids):
        return self.text_proj(self.text(ids)), ids != self.pad_id

    def embed_images(self, images):
        return max_pool(self.image_tokens(images))

    def embed_texts(self, ids):
        tokens, mask = self.text_tokens(ids)
        return max_pool(tokens, mask)

    def mlm_logits(self, masked_ids, positions):
        """Vocabulary logits at ``positions`` (a (row, col) index pair) of the corrupted text."""
        hidden = self.text(masked_ids)
        return self.mlm_head(hidden[positions[0], positions[1]])


def encode_image(model: DualEncoder, images):
    return model.visual(images)


def encode_text(model: DualEncoder, ids):
    return model.text(ids)


@dataclass
class LossReport:
    l_i2t: float
    l_t2i: float
    l_con: float
    l_pre: float
    beta: int
    l_mlm: float | None = None
    step: int | None = None
    epoch: int | None = None

    def as_row(self) -> dict:
        row = {"step": self.step, "epoch": self.epoch, "L_I2T": self.l_i2t, "L_T2I": self.l_t2i, "L_con": self.l_con}
        if self.l_mlm is not None:
            row["L_mlm"] = self.l_mlm
        row["L_pre"] = self.l_pre
        row["beta"] = self.beta
        return row


def similarity_matrix(V, T):
    return F.normalize(V, dim=-1) @ F.normalize(T, dim=-1).T


def contrastive_loss(V, T, tau=1.0):
    """Symmetric in-batch softmax cross-entropy over cosine similarities.

    Row i of ``V`` is matched with row i of ``T``.  Returns
    ``(L_I2T, L_T2I, L_con)`` as tensors.
    """
    if V.shape != T.shape or V.ndim != 2:
        raise ContractError(f"V and T must be equal-shaped N x d matrices, got {tuple(V.shape)} and {tuple(T.shape)}")
    if V.shape[0] < 2:
        raise ContractError("contrastive loss needs at least 2 pairs")
    if not (torch.isfinite(V).all() and torch.isfinite(T).all()):
        raise NumericError("non-finite values in embeddings")
    logits = tau * similarity_matrix(V, T)
    # log_softmax subtracts the running max internally
    l_i2t = -torch.diagonal(F.log_softmax(logits, dim=1)).mean()
    l_t2i = -torch.diagonal(F.log_softmax(logits, dim=0)).mean()
    return l_i2t, l_t2i, (l_i2t + l_t2i) / 2


def mlm_loss(logits, targets, reduction: str = "mean"):
    """Cross-entropy of masked-token predictions.

    ``reduction="sum"`` gives the plain sum over masked positions,
    ``"mean"`` (default) divides by their count.
    """
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ContractError("mlm_loss needs at least one masked position")
    if targets.shape != (logits.shape[0],):
        raise ContractError("one target id per masked position required")
    nll = -F.log_softmax(logits, dim=-1).gather(1, targets.unsqueeze(1)).squeeze(1)
    if reduction == "sum":
        return nll.sum()
    if reduction == "mean":
        return nll.mean()
    raise ContractError(f"unknown reduction {reduction!r}")


@dataclass
class MaskedText:
    ids: np.ndarray
    masked_ids: np.ndarray
    positions: np.ndarray
    targets: np.ndarray


def mask_tokens(ids, vocabulary: Vocabulary, rng, rate: float = 0.15) -> MaskedText:
    """Corrupt a token sequence for masked-LM training.

    Each non-pad, non-[CLS] position is picked with probability ``rate``;
    if none is picked, one eligible position is forced.  Picked positions
    become [MASK] 80% of the time, a random word 10%, unchanged 10%.
    """
    ids = np.asarray(ids, dtype=np.int64)
    eligible = np.flatnonzero((ids != vocabulary.pad_id) & (ids != vocabulary.cls_id))
    if eligible.size == 0:
        raise ContractError("no maskable tokens in sequence")
    picked = eligible[rng.random(eligible.size) < rate]
    if picked.size == 0:
        picked = eligible[[int(rng.integers(eligible.size))]]
    masked = ids.copy()
    n_words = len(vocabulary) - 4
    for pos in picked:
        u = rng.random()
        if u < 0.8:
            masked[pos] = vocabulary.mask_id
        elif u < 0.9 and n_words > 0:
            masked[pos] = 4 + int(rng.integers(n_words))
    return MaskedText(ids, masked, picked, ids[picked].copy())


def mask_batch(ids_batch, vocabulary, rng, rate=0.15):
    """Mask every row; returns corrupted ids, (rows, cols) positions and targets."""
    masked_rows, rows, cols, targets = [], [], [], []
    for r, ids in enumerate(ids_batch):
        m = mask_tokens(ids, vocabulary, rng, rate)
        masked_rows.append(m.masked_ids)
        rows.extend([r] * len(m.positions))
        cols.extend(m.positions.tolist())
        targets.extend(m.targets.tolist())
    return (
        np.stack(masked_rows),
        (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)),
        np.asarray(targets, dtype=np.int64),
    )


@dataclass
class PretrainBatch:
    images: torch.Tensor
    ids: torch.Tensor
    masked_ids: torch.Tensor | None = None
    positions: tuple | None = None
    targets: torch.Tensor | None = None
    batch_id: str = ""


def pretrain_objective(model: DualEncoder, batch: PretrainBatch, beta: int, tau: float = 1.0):
    """Return ``(L_pre tensor, LossReport)`` for one batch without stepping."""
    if beta not in (0, 1):
        raise ValidationError("beta must be 0 or 1")
    V = model.embed_images(batch.images)
    T = model.embed_texts(batch.ids)
    l_i2t, l_t2i, l_con = contrastive_loss(V, T, model.tau(tau))
    total = l_con
    l_mlm = None
    if beta:
        if batch.masked_ids is None:
            raise ContractError("beta=1 needs a masked batch")
        logits = model.mlm_logits(batch.masked_ids, batch.positions)
        l_mlm = mlm_loss(logits, batch.targets)
        total = l_con + l_mlm
    report = LossReport(
        l_i2t=l_i2t.item(), l_t2i=l_t2i.item(), l_con=l_con.item(), l_pre=total.item(), beta=beta,
        l_mlm=None if l_mlm is None else l_mlm.item(),
    )
    if not math.isfinite(report.l_pre):
        raise NumericError(f"non-finite pre-training loss in batch {batch.batch_id}: {report.as_row()}")
    return total, report


def pretrain_step(model, batch: PretrainBatch, beta: int, tau: float, optimizer, scheduler=None) -> LossReport:
    model.train()
    optimizer.zero_grad()
    loss, report = pretrain_objective(model, batch, beta, tau)
    loss.backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return report


@dataclass
class PretrainConfig:
    epochs: int = 15
    batch_size: int = 512
    lr: float = 1e-5
    weight_decay: float = 0.01
    warmup_frac: float = 0.1
    beta: int = 1
    tau: float = 1.0
    learnable_tau: bool = False
    mask_rate: float = 0.15
    seed: int = 0
    max_len: int = MAX_LEN
    encoder: dict = field(default_factory=dict)  # EncoderConfig overrides
    image_size: tuple = (32, 16)
    patch: int = 8

    def __post_init__(self):
        if self.beta not in (0, 1):
            raise ValidationError("beta must be 0 or 1")
        if self.batch_size < 2:
            raise ValidationError("contrastive training needs batch_size >= 2")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValidationError("warmup_frac must lie in [0, 1]")


def warmup_factor(step: int, total_steps: int, warmup_frac: float = 0.1) -> float:
    """Linear warm-up over the first ``warmup_frac`` of steps, then constant."""
    warm = max(1, int(round(warmup_frac * total_steps)))
    return min(1.0, (step + 1) / warm)


def record_images(records, cfg: EncoderConfig, image_size=(32, 16), patch=8, flip_rng=None) -> torch.Tensor:
    """Stack the visual inputs of a list of records into an (N, P, k) tensor."""
    rows = []
    for rec in records:
        if rec.features is not None:
            x = np.asarray(rec.features, dtype=np.float32).reshape(cfg.visual_patches, cfg.visual_in_dim)
        elif rec.image_ref is not None:
            flip = bool(flip_rng.random() < 0.5) if flip_rng is not None else False
            x = load_image_patches(rec.image_ref, image_size, patch, flip=flip).astype(np.float32)
        else:
            raise ContractError(f"record {rec.image_id} has neither features nor image_ref")
        rows.append(x)
    return torch.from_numpy(np.stack(rows))


def infer_encoder_config(manifest: DatasetManifest, vocab: Vocabulary, overrides: dict, max_len: int, image_size=(32, 16), patch=8) -> EncoderConfig:
    first = manifest.records[0]
    params = dict(vocab_size=len(vocab), max_len=max_len)
    if first.features is not None:
        params.update(visual_input="features", visual_in_dim=len(first.features), visual_patches=1)
    else:
        h, w = image_size
        params.update(visual_input="patches", visual_in_dim=patch * patch * 3, visual_patches=(h // patch) * (w // patch))
    params.update(overrides)
    return EncoderConfig(**params)


def make_pretrain_batch(records, vocab, enc_cfg, rng, mask_rate, beta, image_size=(32, 16), patch=8, batch_id=""):
    ids = tokenize_batch([r.caption for r in records], vocab, enc_cfg.max_len)
    batch = PretrainBatch(
        images=record_images(records, enc_cfg, image_size, patch),
        ids=torch.from_numpy(ids),
        batch_id=batch_id,
    )
    if beta:
        masked, positions, targets = mask_batch(ids, vocab, rng, mask_rate)
        batch.masked_ids = torch.from_numpy(masked)
        batch.positions = (torch.from_numpy(positions[0]), torch.from_numpy(positions[1]))
        batch.targets = torch.from_numpy(targets)
    return batch


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def pretrain_loop(manifest: DatasetManifest, config: PretrainConfig, vocab: Vocabulary | None = None, log_every: int = 0):
    """Pre-train a dual encoder on captioned records and return a checkpoint dict."""
    records = [r for r in manifest.records if r.caption]
    if len(records) < config.batch_size:
        raise ValidationError(f"batch_size {config.batch_size} exceeds {len(records)} captioned records")
    if vocab is None:
        vocab = Vocabulary.build(r.caption for r in records)
    torch.manual_seed(config.seed)
    enc_cfg = infer_encoder_config(DatasetManifest(records), vocab, config.encoder, config.max_len, config.image_size, config.patch)
    model = DualEncoder(enc_cfg, vocab.pad_id, config.learnable_tau, config.tau)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    steps_per_epoch = len(records) // config.batch_size
    total = steps_per_epoch * config.epochs
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda s: warmup_factor(s, total, config.warmup_frac))
    mask_rng = np.random.default_rng([config.seed, 1])
    history = []
    step = 0
    for epoch in range(config.epochs):
        for bi, recs in enumerate(batch_iter(records, config.batch_size, config.seed, epoch)):
            batch = make_pretrain_batch(
                recs, vocab, enc_cfg, mask_rng, config.mask_rate, config.beta,
                config.image_size, config.patch, batch_id=f"epoch{epoch}/batch{bi}",
            )
            report = pretrain_step(model, batch, config.beta, config.tau, optimizer, scheduler)
            report.step, report.epoch = step, epoch
            history.append(report)
            if log_every and step % log_every == 0:
                log.info("pretrain %s", report.as_row())
            step += 1
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": "pretrain",
        "encoder_config": asdict(enc_cfg),
        "vocab": list(vocab.tokens),
        "vocab_hash": vocab.content_hash(),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "rng_state": {"torch": torch.get_rng_state(), "mask": mask_rng.bit_generator.state},
        "config": asdict(config),
        "config_hash": config_hash(asdict(config)),
        "learnable_tau": config.learnable_tau,
        "history": [r.as_row() for r in history],
    }


def save_checkpoint(ckpt: dict, path) -> None:
    torch.save(ckpt, path)


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a checkpoint file")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def model_from_checkpoint(ckpt: dict) -> tuple[DualEncoder, Vocabulary]:
    vocab = Vocabulary(ckpt["vocab"])
    cfg = EncoderConfig(**ckpt["encoder_config"])
    model = DualEncoder(cfg, vocab.pad_id, ckpt.get("learnable_tau", False))
    state = ckpt["model_state"]
    if "encoder_state" in ckpt:
        state = ckpt["encoder_state"]
    model.load_state_dict(state)
    return model, vocab
