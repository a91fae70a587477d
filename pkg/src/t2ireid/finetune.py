"""Supervised fine-tuning for text-to-image person retrieval."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetManifest, Vocabulary, batch_iter, tokenize_batch
from .errors import ContractError, MiningError, NumericError, ValidationError
from .pretrain import (
    CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
    DualEncoder,
    EncoderConfig,
    config_hash,
    infer_encoder_config,
    max_pool,
    model_from_checkpoint,
    record_images,
    similarity_matrix,
)

log = logging.getLogger(__name__)


class SharedClassifier(nn.Module):
    """One identity classifier applied to both modalities."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.weight = nn.Parameter(torch.empty(dim, num_classes))
        nn.init.normal_(self.weight, std=0.02)

    def forward(self, x):
        return x @ self.weight


def id_loss(v, t, y, classifier: SharedClassifier):
    """Mean over pairs of -(log p_v[y] + log p_t[y]) under the shared classifier."""
    y = torch.as_tensor(y, dtype=torch.long)
    if y.numel() and (int(y.max()) >= classifier.num_classes or int(y.min()) < 0):
        raise ContractError(f"identity label outside [0, {classifier.num_classes})")
    logp_v = F.log_softmax(classifier(v), dim=-1)
    logp_t = F.log_softmax(classifier(t), dim=-1)
    nll = -(logp_v.gather(1, y.unsqueeze(1)) + logp_t.gather(1, y.unsqueeze(1))).squeeze(1)
    return nll.mean()


def mine_semi_hard(anchor, candidates, labels, anchor_label, positive_index: int) -> int:
    """Index of the semi-hard negative for ``anchor``.

    Among candidates whose label differs from ``anchor_label`` and whose
    similarity to the anchor is strictly below the positive's, take the
    most similar one.  If no negative is easier than the positive, fall
    back to the most similar negative overall.  Ties go to the lower index.
    """
    sims = np.asarray(candidates, dtype=np.float64) @ np.asarray(anchor, dtype=np.float64)
    return mine_from_similarities(sims, labels, anchor_label, positive_index)


def mine_from_similarities(sims, labels, anchor_label, positive_index: int) -> int:
    sims = np.asarray(sims, dtype=np.float64)
    labels = np.asarray(labels)
    neg = labels != anchor_label
    if not neg.any():
        raise MiningError(f"no negative for identity {anchor_label} in batch")
    pos_sim = sims[positive_index]
    semi = neg & (sims < pos_sim)
    pool = semi if semi.any() else neg
    masked = np.where(pool, sims, -np.inf)
    return int(np.argmax(masked))


def mine_batch(V, T, labels):
    """Semi-hard negatives for every row, in both retrieval directions.

    Returns ``(neg_text_for_image, neg_image_for_text)`` index arrays.
    """
    with torch.no_grad():
        S = similarity_matrix(V, T).double().cpu().numpy()
    labels = np.asarray(labels)
    n = len(labels)
    neg_t = np.array([mine_from_similarities(S[i], labels, labels[i], i) for i in range(n)], dtype=np.int64)
    neg_v = np.array([mine_from_similarities(S[:, i], labels, labels[i], i) for i in range(n)], dtype=np.int64)
    return neg_t, neg_v


def ranking_loss(v, t, neg_text, neg_image, alpha: float = 0.2):
    """Bidirectional hinge triplet loss averaged over the batch.

    Row i of ``v`` and ``t`` is a positive pair; ``neg_text[i]`` indexes the
    negative text for image i and ``neg_image[i]`` the negative image for
    text i.
    """
    if not alpha > 0:
        raise ContractError("margin alpha must be positive")
    vn = F.normalize(v, dim=-1)
    tn = F.normalize(t, dim=-1)
    pos = (vn * tn).sum(-1)
    neg_t = torch.as_tensor(neg_text, dtype=torch.long)
    neg_v = torch.as_tensor(neg_image, dtype=torch.long)
    s_vt_neg = (vn * tn[neg_t]).sum(-1)
    s_tv_neg = (tn * vn[neg_v]).sum(-1)
    hinge = F.relu(alpha - pos + s_vt_neg) + F.relu(alpha - pos + s_tv_neg)
    return hinge.mean()


class PrototypeHead(nn.Module):
    """Shared learnable prototypes attend over each modality's tokens.

    Each of the K prototypes queries the token features with scaled
    dot-product softmax attention; the K attended vectors are concatenated
    and mapped linearly to ``out_dim``.  There are no positional terms, so
    the head is invariant to token order.
    """

    def __init__(self, width: int, num_prototypes: int = 6, out_dim: int | None = None):
        super().__init__()
        if num_prototypes < 1:
            raise ValidationError("num_prototypes must be >= 1")
        self.width = width
        self.prototypes = nn.Parameter(torch.randn(num_prototypes, width) / math.sqrt(width))
        self.out = nn.Linear(num_prototypes * width, out_dim or width)

    def attend(self, tokens, mask=None):
        if tokens.shape[1] == 0:
            raise ContractError("prototype attention over an empty token sequence")
        scores = torch.einsum("kd,nld->nkl", self.prototypes, tokens) / math.sqrt(self.width)
        if mask is not None:
            if not bool(mask.any(dim=1).all()):
                raise ContractError("prototype attention over an all-padding sequence")
            scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        attn = scores.softmax(dim=-1)
        return torch.einsum("nkl,nld->nkd", attn, tokens).flatten(1)

    def forward(self, tokens, mask=None):
        return self.out(self.attend(tokens, mask))


def pgu_features(head: PrototypeHead, image_tokens, text_tokens, text_mask=None):
    """Granularity-unified (image, text) features using the same prototypes."""
    return head(image_tokens), head(text_tokens, text_mask)


def pgu_loss(v_u, t_u, y, classifier, neg_text, neg_image, alpha: float = 0.2):
    return id_loss(v_u, t_u, y, classifier) + ranking_loss(v_u, t_u, neg_text, neg_image, alpha)


@dataclass
class FinetuneLossReport:
    l_id: float
    l_rk: float
    l_ft: float
    gamma: int
    alpha: float
    l_pgu: float | None = None
    step: int | None = None
    epoch: int | None = None

    def as_row(self) -> dict:
        row = {"step": self.step, "epoch": self.epoch, "L_id": self.l_id, "L_rk": self.l_rk}
        if self.l_pgu is not None:
            row["L_pgu"] = self.l_pgu
        row["L_ft"] = self.l_ft
        row["gamma"] = self.gamma
        return row


def fuse(global_feat, unified_feat):
    """Concatenate unit-normalised features; cosine on the result averages the two cosines."""
    return torch.cat([F.normalize(global_feat, dim=-1), F.normalize(unified_feat, dim=-1)], dim=-1) / math.sqrt(2)


class RetrievalModel(nn.Module):
    """Dual encoder plus identity classifier and, when ``gamma=1``, the prototype head."""

    def __init__(self, encoder: DualEncoder, num_classes: int, gamma: int, num_prototypes: int = 6):
        super().__init__()
        if gamma not in (0, 1):
            raise ValidationError("gamma must be 0 or 1")
        self.encoder = encoder
        self.gamma = gamma
        d = encoder.cfg.embed_dim
        self.classifier = SharedClassifier(d, num_classes)
        if gamma:
            self.pgu = PrototypeHead(d, num_prototypes, d)
            self.pgu_classifier = SharedClassifier(d, num_classes)
        else:
            self.pgu = None
            self.pgu_classifier = None

    def forward_features(self, images, ids):
        img_tok = self.encoder.image_tokens(images)
        txt_tok, txt_mask = self.encoder.text_tokens(ids)
        out = {"v": max_pool(img_tok), "t": max_pool(txt_tok, txt_mask)}
        if self.pgu is not None:
            out["v_u"], out["t_u"] = pgu_features(self.pgu, img_tok, txt_tok, txt_mask)
        return out

    def embed_images(self, images):
        img_tok = self.encoder.image_tokens(images)
        if self.pgu is not None:
            return fuse(max_pool(img_tok), self.pgu(img_tok))
        return max_pool(img_tok)

    def embed_texts(self, ids):
        txt_tok, mask = self.encoder.text_tokens(ids)
        if self.pgu is not None:
            return fuse(max_pool(txt_tok, mask), self.pgu(txt_tok, mask))
        return max_pool(txt_tok, mask)

    def param_groups(self, lr_text: float, lr_visual: float, lr_head: float):
        enc = self.encoder
        text = list(enc.text.parameters()) + list(enc.text_proj.parameters())
        visual = list(enc.visual.parameters()) + list(enc.visual_proj.parameters())
        head = list(self.classifier.parameters())
        if self.pgu is not None:
            head += list(self.pgu.parameters()) + list(self.pgu_classifier.parameters())
        return [
            {"params": text, "lr": lr_text, "name": "text"},
            {"params": visual, "lr": lr_visual, "name": "visual"},
            {"params": head, "lr": lr_head, "name": "head"},
        ]


@dataclass
class FinetuneBatch:
    images: torch.Tensor
    ids: torch.Tensor
    labels: torch.Tensor
    batch_id: str = ""


def finetune_objective(model: RetrievalModel, batch: FinetuneBatch, alpha: float = 0.2):
    """Return ``(L_ft tensor, FinetuneLossReport)`` for one batch without stepping."""
    feats = model.forward_features(batch.images, batch.ids)
    labels = batch.labels.numpy()
    neg_t, neg_v = mine_batch(feats["v"], feats["t"], labels)
    l_id = id_loss(feats["v"], feats["t"], batch.labels, model.classifier)
    l_rk = ranking_loss(feats["v"], feats["t"], neg_t, neg_v, alpha)
    total = l_id + l_rk
    l_pgu = None
    if model.gamma:
        neg_tu, neg_vu = mine_batch(feats["v_u"], feats["t_u"], labels)
        l_pgu = pgu_loss(feats["v_u"], feats["t_u"], batch.labels, model.pgu_classifier, neg_tu, neg_vu, alpha)
        total = total + l_pgu
    report = FinetuneLossReport(
        l_id=l_id.item(), l_rk=l_rk.item(), l_ft=total.item(), gamma=model.gamma, alpha=alpha,
        l_pgu=None if l_pgu is None else l_pgu.item(),
    )
    if not math.isfinite(report.l_ft):
        raise NumericError(f"non-finite fine-tuning loss in batch {batch.batch_id}: {report.as_row()}")
    return total, report


def finetune_step(model, batch: FinetuneBatch, alpha: float, optimizer) -> FinetuneLossReport:
    model.train()
    optimizer.zero_grad()
    loss, report = finetune_objective(model, batch, alpha)
    loss.backward()
    optimizer.step()
    return report


@dataclass
class FinetuneConfig:
    epochs: int = 60
    batch_size: int = 64
    lr_text: float = 1e-5
    lr_visual: float = 1e-4
    lr_head: float = 1e-4
    gamma: int = 1
    alpha: float = 0.2
    num_prototypes: int = 6
    seed: int = 0
    image_size: tuple = (32, 16)
    patch: int = 8
    encoder: dict | None = None  # used only when training from scratch

    def __post_init__(self):
        if self.gamma not in (0, 1):
            raise ValidationError("gamma must be 0 or 1")
        if not self.alpha > 0:
            raise ValidationError("alpha must be positive")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")


def _label_map(records):
    ids = sorted({r.identity for r in records})
    return {pid: i for i, pid in enumerate(ids)}


def make_finetune_batch(records, vocab, enc_cfg, label_map, flip_rng=None, image_size=(32, 16), patch=8, batch_id=""):
    ids = tokenize_batch([r.caption for r in records], vocab, enc_cfg.max_len)
    return FinetuneBatch(
        images=record_images(records, enc_cfg, image_size, patch, flip_rng),
        ids=torch.from_numpy(ids),
        labels=torch.tensor([label_map[r.identity] for r in records], dtype=torch.long),
        batch_id=batch_id,
    )


def finetune_loop(manifest: DatasetManifest, checkpoint: dict | None, config: FinetuneConfig, log_every: int = 0):
    """Fine-tune from a pre-training checkpoint (or from scratch if ``None``)."""
    records = [r for r in manifest.records if r.split in (None, "train") and r.identity is not None and r.caption]
    if len({r.identity for r in records}) < 2:
        raise ValidationError("fine-tuning needs at least 2 identities")
    if len(records) < config.batch_size:
        raise ValidationError(f"batch_size {config.batch_size} exceeds {len(records)} training records")
    torch.manual_seed(config.seed)
    if checkpoint is not None:
        encoder, vocab = model_from_checkpoint(checkpoint)
    else:
        vocab = Vocabulary.build(r.caption for r in records)
        enc_cfg = infer_encoder_config(DatasetManifest(records), vocab, config.encoder or {}, 100, config.image_size, config.patch)
        encoder = DualEncoder(enc_cfg, vocab.pad_id)
    label_map = _label_map(records)
    model = RetrievalModel(encoder, len(label_map), config.gamma, config.num_prototypes)
    optimizer = torch.optim.Adam(model.param_groups(config.lr_text, config.lr_visual, config.lr_head))
    flip_rng = np.random.default_rng([config.seed, 2])
    resample_rng = np.random.default_rng([config.seed, 3])
    history = []
    step = 0
    for epoch in range(config.epochs):
        for bi, recs in enumerate(batch_iter(records, config.batch_size, config.seed, epoch)):
            batch = make_finetune_batch(
                recs, vocab, encoder.cfg, label_map, flip_rng, config.image_size, config.patch,
                batch_id=f"epoch{epoch}/batch{bi}",
            )
            try:
                report = finetune_step(model, batch, config.alpha, optimizer)
            except MiningError:
                pick = resample_rng.choice(len(records), size=config.batch_size, replace=False)
                batch = make_finetune_batch(
                    [records[i] for i in pick], vocab, encoder.cfg, label_map, flip_rng,
                    config.image_size, config.patch, batch_id=f"epoch{epoch}/batch{bi}/resampled",
                )
                report = finetune_step(model, batch, config.alpha, optimizer)
            report.step, report.epoch = step, epoch
            history.append(report)
            if log_every and step % log_every == 0:
                log.info("finetune %s", report.as_row())
            step += 1
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": "finetune",
        "encoder_config": asdict(encoder.cfg),
        "vocab": list(vocab.tokens),
        "vocab_hash": vocab.content_hash(),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "rng_state": {"torch": torch.get_rng_state()},
        "config": asdict(config),
        "config_hash": config_hash(asdict(config)),
        "gamma": config.gamma,
        "num_classes": len(label_map),
        "label_map": {str(k): v for k, v in label_map.items()},
        "learnable_tau": checkpoint.get("learnable_tau", False) if checkpoint else False,
        "history": [r.as_row() for r in history],
    }


def retrieval_model_from_checkpoint(ckpt: dict):
    """Rebuild the inference model from a pre-training or fine-tuning checkpoint."""
    vocab = Vocabulary(ckpt["vocab"])
    cfg = EncoderConfig(**ckpt["encoder_config"])
    encoder = DualEncoder(cfg, vocab.pad_id, ckpt.get("learnable_tau", False))
    if ckpt["stage"] == "pretrain":
        encoder.load_state_dict(ckpt["model_state"])
        return encoder, vocab
    model = RetrievalModel(encoder, ckpt["num_classes"], ckpt["gamma"], ckpt["config"]["num_prototypes"])
    model.load_state_dict(ckpt["model_state"])
    return model, vocab
