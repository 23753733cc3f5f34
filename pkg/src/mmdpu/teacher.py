"""Manipulation teacher: strided conv stages, attention over per-stage summaries, sigmoid head."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .losses import log_prob_from_logits, teacher_objective, vpu_log_loss
from .manip_synth import PUManipSets

CHECKPOINT_VERSION = 1
GRAD_CLIP = 5.0


@dataclass
class TeacherConfig:
    stage_channels: Sequence[int] = (16, 32, 64, 64)
    attn_dim: int = 32
    attn_heads: int = 2
    warmup_epochs: int = 10
    delta: float = 0.1
    lr: float = 1e-3
    image_size: int = 224
    in_channels: int = 3
    batch_size: int = 32

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) < 2:
            raise ValueError("teacher needs at least 2 stages")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.attn_dim % self.attn_heads:
            raise ValueError("attn_dim must be divisible by attn_heads")


class TeacherNet(nn.Module):
    def __init__(self, cfg: TeacherConfig):
        super().__init__()
        stages, c_in = [], cfg.in_channels
        for k, c in enumerate(cfg.stage_channels):
            stride = 1 if k == 0 else 2
            stages.append(nn.Sequential(nn.Conv2d(c_in, c, 3, stride=stride, padding=1), nn.ReLU()))
            c_in = c
        self.stages = nn.ModuleList(stages)
        self.proj = nn.ModuleList(nn.Linear(2 * c, cfg.attn_dim) for c in cfg.stage_channels)
        self.stage_tag = nn.Parameter(torch.zeros(len(cfg.stage_channels), cfg.attn_dim))
        self.attn = nn.MultiheadAttention(cfg.attn_dim, cfg.attn_heads, batch_first=True)
        self.head = nn.Linear(cfg.attn_dim, 1)
        nn.init.normal_(self.stage_tag, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = (x - 0.5) * 4.0
        tokens = []
        for stage, proj in zip(self.stages, self.proj):
            x = stage(x)
            tokens.append(proj(torch.cat([x.mean(dim=(2, 3)), x.amax(dim=(2, 3))], dim=1)))
        seq = torch.stack(tokens, dim=1) + self.stage_tag
        h, _ = self.attn(seq, seq, seq, need_weights=False)
        return self.head((seq + h).mean(dim=1)).squeeze(-1)


@dataclass
class TeacherState:
    config: TeacherConfig
    net: TeacherNet
    optimizer: torch.optim.Optimizer
    epochs_warmed: int = 0
    warmed: bool = False
    n_adapt_steps: int = 0
    history: list = field(default_factory=list)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype


def init_teacher(config: Optional[TeacherConfig] = None, seed: int = 0, dtype=torch.float32) -> TeacherState:
    config = config or TeacherConfig()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = TeacherNet(config).to(dtype)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    return TeacherState(config, net, opt)


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack H x W x C arrays (or a N x H x W x C array) into an N x C x H x W tensor."""
    if isinstance(images, torch.Tensor):
        return images.to(dtype)
    arr = np.stack([np.asarray(im) for im in images]) if not isinstance(images, np.ndarray) else images
    if arr.ndim != 4:
        raise ValueError(f"expected a batch of H x W x C images, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def _check_input(state: TeacherState, x: torch.Tensor) -> None:
    cfg = state.config
    if x.dim() != 4 or x.shape[1] != cfg.in_channels or tuple(x.shape[2:]) != (cfg.image_size, cfg.image_size):
        raise ValueError(
            f"teacher expects N x {cfg.in_channels} x {cfg.image_size} x {cfg.image_size}, got {tuple(x.shape)}"
        )


def teacher_logits(state: TeacherState, images) -> torch.Tensor:
    x = images_to_tensor(images, state.dtype)
    _check_input(state, x)
    return state.net(x)


@torch.no_grad()
def teacher_forward(state: TeacherState, images) -> torch.Tensor:
    """Manipulation probabilities in inference mode, one per image."""
    was_training = state.net.training
    state.net.eval()
    try:
        return torch.sigmoid(teacher_logits(state, images))
    finally:
        state.net.train(was_training)


def _apply(state: TeacherState, loss: torch.Tensor) -> None:
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    nn.utils.clip_grad_norm_(state.net.parameters(), GRAD_CLIP)
    state.optimizer.step()


def _pre_loss(state: TeacherState, imd_batch) -> torch.Tensor:
    if len(imd_batch) == 0:
        raise ValueError("IMD batch is empty")
    logits = teacher_logits(state, [s.image for s in imd_batch])
    y = torch.tensor([s.manip_label for s in imd_batch], dtype=logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, y)


def _pu_loss(state: TeacherState, pu_sets: PUManipSets) -> torch.Tensor:
    if not pu_sets.positives or not pu_sets.unlabeled:
        raise ValueError("positive and unlabeled sets must be nonempty")
    pos = [img for img, _ in pu_sets.positives]
    logits = teacher_logits(state, pos + list(pu_sets.unlabeled))
    log_f = log_prob_from_logits(logits)
    return vpu_log_loss(log_f[: len(pos)], log_f[len(pos):])


def pretrain_step(state: TeacherState, imd_batch):
    """One supervised step on labeled manipulation data. Returns ``(state, l_pre)``."""
    state.net.train()
    loss = _pre_loss(state, imd_batch)
    _apply(state, loss)
    return state, float(loss.detach())


def _require_warm(state: TeacherState) -> None:
    if not state.warmed:
        raise RuntimeError("teacher must finish warm-up before PU adaptation")


def adapt_step(state: TeacherState, pu_sets: PUManipSets, delta: Optional[float] = None):
    """One step on ``delta`` times the PU loss alone (``config.delta`` when omitted). Returns ``(state, l_pu)``."""
    _require_warm(state)
    delta = state.config.delta if delta is None else delta
    state.net.train()
    if delta == 0:
        with torch.no_grad():
            return state, float(_pu_loss(state, pu_sets))
    loss = _pu_loss(state, pu_sets)
    _apply(state, delta * loss)
    state.n_adapt_steps += 1
    return state, float(loss.detach())


def joint_step(state: TeacherState, imd_batch, pu_sets: PUManipSets, delta: Optional[float] = None,
               use_pre: bool = True):
    """Single optimizer step on ``l_pre + delta * l_pu``; ``delta`` defaults to ``config.delta``.

    With ``use_pre=False`` the supervised term is dropped (the teacher learns
    from the PU term only).
    """
    _require_warm(state)
    delta = state.config.delta if delta is None else delta
    state.net.train()
    l_pre = _pre_loss(state, imd_batch) if use_pre else None
    l_pu = _pu_loss(state, pu_sets) if (delta > 0 or not use_pre) else None
    pre_val = float(l_pre.detach()) if l_pre is not None else 0.0
    if l_pu is None:
        with torch.no_grad():
            pu_val = float(_pu_loss(state, pu_sets))
    else:
        pu_val = float(l_pu.detach())
    terms = [t for t in (l_pre, None if l_pu is None else delta * l_pu) if t is not None]
    if terms:
        _apply(state, sum(terms))
    if l_pu is not None:
        state.n_adapt_steps += 1
    out = {"l_pre": pre_val, "l_pu": pu_val, "l_teacher": teacher_objective(pre_val, pu_val, delta)}
    state.history.append(out)
    return state, out


def warmup(state: TeacherState, imd_dataset, epochs: int, rng: Optional[np.random.Generator] = None,
           batch_size: Optional[int] = None) -> TeacherState:
    """``epochs`` shuffled passes of :func:`pretrain_step` over ``imd_dataset``."""
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    bs = batch_size or state.config.batch_size
    for _ in range(epochs):
        order = rng.permutation(len(imd_dataset))
        for start in range(0, len(order), bs):
            pretrain_step(state, [imd_dataset[i] for i in order[start:start + bs]])
        state.epochs_warmed += 1
    state.warmed = True
    return state


def snapshot(state: TeacherState) -> dict:
    return copy.deepcopy(state.net.state_dict())


def save_teacher(state: TeacherState, path) -> None:
    cfg = asdict(state.config)
    cfg["stage_channels"] = list(cfg["stage_channels"])
    torch.save(
        {
            "format": "mmdpu-teacher",
            "version": CHECKPOINT_VERSION,
            "config": cfg,
            "epochs_warmed": state.epochs_warmed,
            "warmed": state.warmed,
            "parameters": state.net.state_dict(),
        },
        path,
    )


def load_teacher(path) -> TeacherState:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "mmdpu-teacher" or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} teacher checkpoint")
    state = init_teacher(TeacherConfig(**blob["config"]))
    state.net.load_state_dict(blob["parameters"])
    state.epochs_warmed = blob["epochs_warmed"]
    state.warmed = blob["warmed"]
    return state
