"""The detection network: encoders, attention fusion, three heads, and the two weak-label rules."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .datamodel import FAKE, REAL, Article, FeatureBundle, LossWeights, PredictionSet
from .losses import (
    bernoulli_kl_from_logits,
    cross_entropy_from_logits,
    log_prob_from_logits,
    student_objective,
    vpu_log_loss,
)
from .teacher import GRAD_CLIP, images_to_tensor

SLOTS = ("text", "image", "manip", "intent")


@dataclass
class EncoderSpec:
    kind: str = "toy-text"
    output_dim: int = 64
    frozen_depth: int = 0
    module: Optional[nn.Module] = None

    def __post_init__(self):
        if self.kind not in ("toy-text", "toy-image", "pluggable"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.output_dim <= 0:
            raise ValueError("output_dim must be positive")
        if self.kind == "pluggable" and self.module is None:
            raise ValueError("pluggable encoders need a module")


@dataclass
class StudentConfig:
    dim: int = 64
    vocab_size: int = 30000
    image_channels: Sequence[int] = (16, 32, 32)
    fusion_heads: int = 4
    dropout: float = 0.3
    manip_threshold: float = 0.5
    intent_threshold: float = 0.5
    use_manip_feature: bool = True
    use_intent_feature: bool = True
    use_reliability_filter: bool = True
    # recorded hyper-parameter with no documented meaning; kept for config compatibility, unused
    K: int = 10

    def __post_init__(self):
        self.image_channels = tuple(int(c) for c in self.image_channels)
        if self.dim % self.fusion_heads:
            raise ValueError("dim must be divisible by fusion_heads")


def _ffn(d_in: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_out), nn.ReLU(), nn.Linear(d_out, d_out))


class ToyTextEncoder(nn.Module):
    def __init__(self, vocab_size: int, dim: int):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, dim, padding_idx=0)
        # small init so that a few informative tokens can outgrow the averaged noise of the rest
        nn.init.normal_(self.embed.weight, std=0.1)
        with torch.no_grad():
            self.embed.weight[0].zero_()

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        m = mask.unsqueeze(-1).to(self.embed.weight.dtype)
        return (self.embed(tokens) * m).sum(1) / m.sum(1).clamp_min(1.0)


class ToyImageEncoder(nn.Module):
    """Strided conv stack; every stage contributes its mean- and max-pooled channels.

    Pooling all stages (as the teacher does) lets local duplicated-region cues
    reach the manipulation head quickly; last-stage pooling alone learned them
    several times slower in desk-scale runs.
    """

    def __init__(self, channels: Sequence[int], in_channels: int = 3):
        super().__init__()
        stages, c_in = [], in_channels
        for k, c in enumerate(channels):
            stages.append(nn.Sequential(nn.Conv2d(c_in, c, 3, stride=1 if k == 0 else 2, padding=1), nn.ReLU()))
            c_in = c
        self.stages = nn.ModuleList(stages)
        self.out_dim = 2 * sum(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, pooled = (x - 0.5) * 4.0, []
        for stage in self.stages:
            h = stage(h)
            pooled += [h.mean(dim=(2, 3)), h.amax(dim=(2, 3))]
        return torch.cat(pooled, dim=1)


def freeze_text_layers(module: nn.Module, depth: int) -> int:
    """Freeze embeddings and the first ``depth`` layers of a transformer text encoder.

    Works with modules exposing ``embeddings`` and ``encoder.layer`` (the
    common pretrained-encoder layout). Returns the number of frozen layers.
    """
    layers = getattr(getattr(module, "encoder", None), "layer", None)
    if layers is None or depth <= 0:
        return 0
    emb = getattr(module, "embeddings", None)
    if emb is not None:
        for p in emb.parameters():
            p.requires_grad_(False)
    n = min(depth, len(layers))
    for layer in list(layers)[:n]:
        for p in layer.parameters():
            p.requires_grad_(False)
    return n


@dataclass
class StudentOutput:
    e_T: torch.Tensor
    e_I: torch.Tensor
    e_M: torch.Tensor
    e_E: torch.Tensor
    z: torch.Tensor
    logits: torch.Tensor
    probs: torch.Tensor
    m_logit: torch.Tensor
    p_M: torch.Tensor
    e_logit: torch.Tensor
    p_E: torch.Tensor
    attn: Optional[torch.Tensor] = None


class AttentionFusion(nn.Module):
    """Multi-head self-attention over the feature slots, then mean-pooling."""

    def __init__(self, dim: int, heads: int, n_slots: int = 4):
        super().__init__()
        self.slot_tag = nn.Parameter(torch.randn(n_slots, dim) * 0.02)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)

    def forward(self, feats: Sequence[torch.Tensor], slots: Sequence[int], return_attention: bool = False):
        seq = torch.stack(list(feats), dim=1) + self.slot_tag[list(slots)]
        h, w = self.attn(seq, seq, seq, need_weights=return_attention, average_attn_weights=False)
        return (seq + h).mean(dim=1), w


class StudentNet(nn.Module):
    def __init__(self, cfg: StudentConfig, text_spec: Optional[EncoderSpec] = None,
                 image_spec: Optional[EncoderSpec] = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        text_spec = text_spec or EncoderSpec("toy-text", d)
        image_spec = image_spec or EncoderSpec("toy-image", d)
        if text_spec.kind == "pluggable":
            self.text_backbone = text_spec.module
            freeze_text_layers(self.text_backbone, text_spec.frozen_depth)
            t_dim = text_spec.output_dim
        else:
            self.text_backbone = ToyTextEncoder(cfg.vocab_size, d)
            t_dim = d
        if image_spec.kind == "pluggable":
            self.image_backbone = image_spec.module
            i_dim = image_spec.output_dim
        else:
            self.image_backbone = ToyImageEncoder(cfg.image_channels)
            i_dim = self.image_backbone.out_dim
        self.pluggable_text = text_spec.kind == "pluggable"
        self.text_align = _ffn(t_dim, d)
        self.image_align = _ffn(i_dim, d)
        self.manip_encoder = _ffn(d, d)
        self.intent_encoder = _ffn(3 * d, d)
        self.fusion = AttentionFusion(d, cfg.fusion_heads)
        self.drop = nn.Dropout(cfg.dropout)
        self.veracity_head = nn.Linear(d, 2)
        self.manip_head = nn.Linear(d, 1)
        self.intent_head = nn.Linear(d, 1)

    @property
    def slots(self) -> list[int]:
        s = [0, 1]
        if self.cfg.use_manip_feature:
            s.append(2)
        if self.cfg.use_intent_feature:
            s.append(3)
        return s

    def encode(self, tokens, mask, images):
        e_T = self.text_align(self.drop(self.text_backbone(tokens, mask)))
        e_I = self.image_align(self.drop(self.image_backbone(images)))
        e_M = self.manip_encoder(e_I) if self.cfg.use_manip_feature else torch.zeros_like(e_I)
        if self.cfg.use_intent_feature:
            e_E = self.intent_encoder(torch.cat([e_T, e_I, e_M], dim=-1))
        else:
            e_E = torch.zeros_like(e_I)
        return e_T, e_I, e_M, e_E

    def fuse(self, e_T, e_I, e_M, e_E, return_attention: bool = False):
        feats = [e_T, e_I, e_M, e_E]
        slots = self.slots
        return self.fusion([feats[s] for s in slots], slots, return_attention)

    def predict(self, z, e_M, e_E):
        logits = self.veracity_head(z)
        m_logit = self.manip_head(e_M).squeeze(-1)
        e_logit = self.intent_head(e_E).squeeze(-1)
        return logits, m_logit, e_logit

    def forward(self, tokens, mask, images, return_attention: bool = False) -> StudentOutput:
        e_T, e_I, e_M, e_E = self.encode(tokens, mask, images)
        z, attn = self.fuse(e_T, e_I, e_M, e_E, return_attention)
        logits, m_logit, e_logit = self.predict(z, e_M, e_E)
        return StudentOutput(
            e_T, e_I, e_M, e_E, z, logits, torch.softmax(logits, -1),
            m_logit, torch.sigmoid(m_logit), e_logit, torch.sigmoid(e_logit), attn,
        )


@dataclass
class StudentState:
    config: StudentConfig
    net: StudentNet
    optimizer: torch.optim.Optimizer
    steps: int = 0
    events: list = field(default_factory=list)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype


def init_student(config: Optional[StudentConfig] = None, seed: int = 0, lr_encoder: float = 3e-5,
                 lr_other: float = 1e-3, text_spec: Optional[EncoderSpec] = None,
                 image_spec: Optional[EncoderSpec] = None, dtype=torch.float32) -> StudentState:
    config = config or StudentConfig()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = StudentNet(config, text_spec, image_spec).to(dtype)
    enc = [p for p in net.text_backbone.parameters() if p.requires_grad] if net.pluggable_text else []
    enc_ids = {id(p) for p in enc}
    rest = [p for p in net.parameters() if p.requires_grad and id(p) not in enc_ids]
    groups = [{"params": rest, "lr": lr_other}]
    if enc:
        groups.append({"params": enc, "lr": lr_encoder})
    return StudentState(config, net, torch.optim.Adam(groups))


def collate(articles: Sequence[Article], dtype=torch.float32):
    """Pad token sequences and stack images. Returns ``(tokens, mask, images, labels)``."""
    max_len = max(len(a.text) for a in articles)
    tokens = torch.zeros(len(articles), max_len, dtype=torch.long)
    for i, a in enumerate(articles):
        tokens[i, : len(a.text)] = torch.tensor(a.text, dtype=torch.long)
    mask = tokens != 0
    images = images_to_tensor([a.image for a in articles], dtype)
    labels = None
    if all(a.veracity is not None for a in articles):
        labels = torch.tensor([a.veracity for a in articles], dtype=torch.long)
    return tokens, mask, images, labels


def run_net(state: StudentState, articles: Sequence[Article], return_attention: bool = False) -> StudentOutput:
    tokens, mask, images, _ = collate(articles, state.dtype)
    return state.net(tokens, mask, images, return_attention)


@torch.no_grad()
def infer(state: StudentState, articles: Sequence[Article], batch_size: int = 256) -> StudentOutput:
    """Inference-mode forward pass over any number of articles, concatenated."""
    state.net.eval()
    outs = [run_net(state, articles[i:i + batch_size]) for i in range(0, len(articles), batch_size)]
    state.net.train()
    return StudentOutput(*(torch.cat([getattr(o, f) for o in outs]) for f in StudentOutput.__dataclass_fields__
                           if f != "attn"))


@torch.no_grad()
def encode(state: StudentState, article: Article) -> FeatureBundle:
    state.net.eval()
    tokens, mask, images, _ = collate([article], state.dtype)
    feats = state.net.encode(tokens, mask, images)
    return FeatureBundle(*(f[0].double().numpy() for f in feats))


@torch.no_grad()
def fuse(state: StudentState, bundle: FeatureBundle) -> np.ndarray:
    state.net.eval()
    feats = [torch.as_tensor(np.asarray(v), dtype=state.dtype).unsqueeze(0)
             for v in (bundle.e_T, bundle.e_I, bundle.e_M, bundle.e_E)]
    z, _ = state.net.fuse(*feats)
    return z[0].double().numpy()


@torch.no_grad()
def predict(state: StudentState, z, e_M, e_E) -> PredictionSet:
    as_t = lambda v: torch.as_tensor(np.asarray(v), dtype=state.dtype).unsqueeze(0)  # noqa: E731
    logits, m_logit, e_logit = state.net.predict(as_t(z), as_t(e_M), as_t(e_E))
    probs = torch.softmax(logits.double(), -1)[0].tolist()
    return PredictionSet(tuple(probs), float(torch.sigmoid(m_logit.double())), float(torch.sigmoid(e_logit.double())))


@dataclass(frozen=True)
class Fact1Partition:
    positive_idx: tuple
    unlabeled_idx: tuple


def fact1_partition(veracity_labels, teacher_scores, threshold: float = 0.5) -> Fact1Partition:
    """Among samples the teacher calls manipulated, real ones are known-harmless
    positives and fake ones are unlabeled."""
    y = np.asarray(veracity_labels).reshape(-1)
    s = np.asarray(teacher_scores, dtype=float).reshape(-1)
    if y.shape != s.shape:
        raise ValueError("labels and scores must have equal length")
    manip = s >= threshold
    pos = np.flatnonzero(manip & (y == REAL))
    unl = np.flatnonzero(manip & (y == FAKE))
    return Fact1Partition(tuple(int(i) for i in pos), tuple(int(i) for i in unl))


def fact2_filter(p_M, p_E, veracity_labels, threshold: float = 0.5) -> np.ndarray:
    """Keep-mask: drop samples predicted harmfully manipulated yet labeled real."""
    p_M = np.asarray(p_M, dtype=float).reshape(-1)
    p_E = np.asarray(p_E, dtype=float).reshape(-1)
    y = np.asarray(veracity_labels).reshape(-1)
    if not (p_M.shape == p_E.shape == y.shape):
        raise ValueError("p_M, p_E and labels must have equal length")
    return ~((p_M >= threshold) & (p_E < threshold) & (y != FAKE))


def student_losses(state: StudentState, out: StudentOutput, labels: torch.Tensor, teacher_scores,
                   weights: LossWeights):
    """Weighted training objective for one batch given the forward output. Returns ``(total, terms)``."""
    cfg = state.config
    t_scores = torch.as_tensor(np.asarray(teacher_scores), dtype=out.p_M.dtype).reshape(-1)
    if t_scores.shape[0] != labels.shape[0]:
        raise ValueError("teacher scores must align with the batch")
    y = labels.numpy()
    vc = cross_entropy_from_logits(out.logits, labels, reduction="none")
    if cfg.use_manip_feature:
        kd = bernoulli_kl_from_logits(t_scores, out.m_logit, reduction="none")
    else:
        kd = torch.zeros_like(vc)
    if cfg.use_manip_feature and cfg.use_intent_feature and cfg.use_reliability_filter:
        keep = fact2_filter(out.p_M.detach().numpy(), out.p_E.detach().numpy(), y, cfg.manip_threshold)
    else:
        keep = np.ones(len(y), dtype=bool)
    l_ir = None
    n_pos = n_unl = 0
    if cfg.use_intent_feature:
        part = fact1_partition(y, t_scores.numpy(), cfg.manip_threshold)
        pos = [i for i in part.positive_idx if keep[i]]
        unl = [i for i in part.unlabeled_idx if keep[i]]
        n_pos, n_unl = len(pos), len(unl)
        if pos and unl:
            log_pe = log_prob_from_logits(out.e_logit)
            l_ir = vpu_log_loss(log_pe[pos], log_pe[unl])
    total, terms = student_objective(vc, kd, l_ir, weights, keep)
    terms.update(n_ir_pos=n_pos, n_ir_unl=n_unl)
    return total, terms


def student_step(state: StudentState, batch: Sequence[Article], teacher_scores, weights: LossWeights):
    """One optimizer step on the weighted student loss. Returns ``(state, terms)``."""
    state.net.train()
    tokens, mask, images, labels = collate(batch, state.dtype)
    if labels is None:
        raise ValueError("student_step needs labeled articles")
    out = state.net(tokens, mask, images)
    total, terms = student_losses(state, out, labels, teacher_scores, weights)
    empty = terms["n_kept"] == 0
    if empty:
        state.events.append({"event": "empty_batch", "step": state.steps})
    else:
        state.optimizer.zero_grad(set_to_none=True)
        total.backward()
        nn.utils.clip_grad_norm_(state.net.parameters(), GRAD_CLIP)
        state.optimizer.step()
        state.steps += 1
    result = {k: (float(v.detach()) if isinstance(v, torch.Tensor) else v) for k, v in terms.items()}
    result["l_total"] = float(total.detach())
    result["stepped"] = not empty
    return state, result


def snapshot(state: StudentState) -> dict:
    return copy.deepcopy(state.net.state_dict())


def dump_features(state: StudentState, articles: Sequence[Article], path) -> int:
    """Write per-sample fused/manipulation/intention features and predictions as JSON lines."""
    out = infer(state, articles)
    with open(path, "w", encoding="utf-8") as fh:
        for i, a in enumerate(articles):
            fh.write(json.dumps({
                "id": a.id,
                "veracity": a.veracity,
                "z": out.z[i].tolist(),
                "e_M": out.e_M[i].tolist(),
                "e_E": out.e_E[i].tolist(),
                "veracity_probs": out.probs[i].tolist(),
                "p_M": float(out.p_M[i]),
                "p_E": float(out.p_E[i]),
            }) + "\n")
    return len(articles)
