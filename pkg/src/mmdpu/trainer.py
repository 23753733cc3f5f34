"""Alternating teacher/student optimization with early stopping and multi-seed runs."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import student as st
from . import teacher as te
from .datamodel import ConfigError, LossWeights
from .manip_synth import CopyMoveParams, build_pu_manip_sets
from .metrics import EvalReport, evaluate, mean_std, significance

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_Lpre", "no_Lpu", "no_Lkd_Lir", "no_eM", "no_eE", "no_eM_eE")
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_iters: Optional[int] = None
    max_epochs: int = 200
    patience_epochs: int = 10
    seeds: Sequence[int] = (1, 2, 3, 4, 5)
    lr_encoder: float = 3e-5
    lr_other: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    manip_threshold: float = 0.5
    intent_threshold: float = 0.5
    # validation cadence in iterations; None validates once per epoch
    eval_every: Optional[int] = None
    use_pre: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")


def apply_variant(variant: str, train_cfg: TrainConfig, student_cfg: st.StudentConfig):
    """Return copies of the configs with the named ablation switched on."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    tc, sc = copy.deepcopy(train_cfg), copy.deepcopy(student_cfg)
    if variant == "no_Lpre":
        tc.use_pre = False
    elif variant == "no_Lpu":
        tc.weights = replace(tc.weights, delta=0.0)
    elif variant == "no_Lkd_Lir":
        tc.weights = replace(tc.weights, alpha=0.0, beta=0.0)
    elif variant == "no_eM":
        sc.use_manip_feature = False
    elif variant == "no_eE":
        sc.use_intent_feature = False
    elif variant == "no_eM_eE":
        sc.use_manip_feature = sc.use_intent_feature = False
    return tc, sc


class EarlyStopping:
    """Tracks the best score; signals a stop after ``patience`` rounds without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: Optional[float] = None
        self.best_round = 0
        self.round = 0

    def update(self, score: float) -> bool:
        self.round += 1
        if self.best is None or score > self.best:
            self.best, self.best_round = score, self.round
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.best is not None and self.round - self.best_round >= self.patience


@dataclass
class RunRecord:
    seed: int
    variant: str = "full"
    iterations: list = field(default_factory=list)
    validations: list = field(default_factory=list)
    events: list = field(default_factory=list)
    best_round: Optional[int] = None
    best_iteration: Optional[int] = None
    stop_reason: str = ""

    def scalars(self) -> list[float]:
        """Every recorded loss/metric value in a fixed order (timestamps excluded)."""
        out = []
        for it in self.iterations:
            out.extend(float(it[k]) for k in sorted(it) if isinstance(it[k], (int, float)))
        for v in self.validations:
            out.extend(float(v[k]) for k in sorted(v) if isinstance(v[k], (int, float)))
        return out

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for it in self.iterations:
                fh.write(json.dumps({"type": "iteration", **it}) + "\n")
            for v in self.validations:
                fh.write(json.dumps({"type": "validation", **v}) + "\n")
            fh.write(json.dumps({"type": "summary", "seed": self.seed, "variant": self.variant,
                                 "best_round": self.best_round, "best_iteration": self.best_iteration,
                                 "stop_reason": self.stop_reason}) + "\n")


@dataclass
class TrainResult:
    student: st.StudentState
    teacher: Optional[te.TeacherState]
    record: RunRecord


def _uses_teacher(sc: st.StudentConfig) -> bool:
    return sc.use_manip_feature or sc.use_intent_feature


def validate(student: st.StudentState, articles) -> EvalReport:
    out = st.infer(student, articles)
    labels = np.array([a.veracity for a in articles])
    return evaluate(labels, out.probs[:, 1].double().numpy())


def train(mmd_train, mmd_valid, imd_data, config: TrainConfig, seed: int = 1,
          teacher_cfg: Optional[te.TeacherConfig] = None, student_cfg: Optional[st.StudentConfig] = None,
          copy_move_params: Optional[CopyMoveParams] = None, variant: str = "full",
          on_event: Optional[Callable[[dict], None]] = None, dtype=torch.float32) -> TrainResult:
    """Warm up the teacher, then alternate one teacher step and one student step per batch.

    Validation runs once per epoch (or every ``eval_every`` iterations);
    training stops after ``patience_epochs`` validation rounds without a
    better macro F1, or at ``max_iters``. The returned states are the
    best-validation checkpoints.
    """
    # dropout draws from the global torch generator; scope and seed it so runs repeat exactly
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return _train(mmd_train, mmd_valid, imd_data, config, seed, teacher_cfg, student_cfg, copy_move_params,
                      variant, on_event, dtype)


def _train(mmd_train, mmd_valid, imd_data, config, seed, teacher_cfg, student_cfg, copy_move_params, variant,
           on_event, dtype) -> TrainResult:
    teacher_cfg = teacher_cfg or te.TeacherConfig()
    student_cfg = student_cfg or st.StudentConfig()
    copy_move_params = copy_move_params or CopyMoveParams()
    config, student_cfg = apply_variant(variant, config, student_cfg)
    student_cfg.manip_threshold = config.manip_threshold
    student_cfg.intent_threshold = config.intent_threshold
    if not mmd_train:
        raise ConfigError("training set is empty")
    need_teacher = _uses_teacher(student_cfg)
    if need_teacher and config.use_pre and not imd_data:
        raise ConfigError("manipulation teacher needs a labeled IMD dataset")

    record = RunRecord(seed=seed, variant=variant)

    def emit(name: str, **info):
        ev = {"event": name, "t_ns": time.perf_counter_ns(), **info}
        record.events.append(ev)
        if on_event is not None:
            on_event(ev)

    rng = np.random.default_rng(seed)
    teacher = None
    if need_teacher:
        teacher = te.init_teacher(teacher_cfg, seed=seed, dtype=dtype)
        epochs = teacher_cfg.warmup_epochs if config.use_pre else 0
        te.warmup(teacher, imd_data, epochs, rng=np.random.default_rng([seed, 7]), batch_size=config.batch_size)
        emit("warmup_done", epochs_warmed=teacher.epochs_warmed)
    student = st.init_student(student_cfg, seed=seed, lr_encoder=config.lr_encoder, lr_other=config.lr_other,
                              dtype=dtype)

    n = len(mmd_train)
    bs = config.batch_size
    replace_draw = n < bs
    if replace_draw:
        warnings.warn(f"training set ({n}) smaller than batch size ({bs}); sampling with replacement")
    per_epoch = 1 if replace_draw else math.ceil(n / bs)
    max_iters = config.max_iters if config.max_iters is not None else per_epoch * config.max_epochs
    stopper = EarlyStopping(config.patience_epochs)
    best_student = st.snapshot(student)
    best_teacher = te.snapshot(teacher) if teacher else None

    def run_validation(it: int, epoch: int):
        nonlocal best_student, best_teacher
        rep = validate(student, mmd_valid) if mmd_valid else None
        score = rep.macro_f1 if rep else -float(record.iterations[-1]["l_total"])
        improved = stopper.update(score)
        snap = {"round": stopper.round, "iteration": it, "epoch": epoch, "macro_f1": score}
        if rep:
            snap.update(accuracy=rep.accuracy, auc=rep.auc)
        record.validations.append(snap)
        if improved:
            best_student = st.snapshot(student)
            best_teacher = te.snapshot(teacher) if teacher else None
            record.best_round, record.best_iteration = stopper.round, it

    it = 0
    stop = ""
    imd_rng = np.random.default_rng([seed, 11])
    for epoch in range(1, config.max_epochs + 1):
        order = rng.choice(n, bs, replace=True) if replace_draw else rng.permutation(n)
        for start in range(0, len(order), bs):
            if it >= max_iters:
                stop = "max_iters"
                break
            batch = [mmd_train[i] for i in order[start:start + bs]]
            row = {"iteration": it + 1, "epoch": epoch}
            if teacher is not None:
                pu = build_pu_manip_sets(batch, copy_move_params, rng)
                imd_batch = []
                if config.use_pre:
                    pick = imd_rng.choice(len(imd_data), min(bs, len(imd_data)), replace=False)
                    imd_batch = [imd_data[j] for j in pick]
                _, t_terms = te.joint_step(teacher, imd_batch, pu, config.weights.delta, use_pre=config.use_pre)
                emit("teacher_update", iteration=it + 1, adapt=teacher.n_adapt_steps)
                row.update(t_terms)
                scores = te.teacher_forward(teacher, [a.image for a in batch]).numpy()
            else:
                scores = np.zeros(len(batch))
            _, s_terms = st.student_step(student, batch, scores, config.weights)
            emit("student_update", iteration=it + 1)
            row.update({k: v for k, v in s_terms.items() if k != "stepped"})
            record.iterations.append(row)
            it += 1
            if config.eval_every and it % config.eval_every == 0:
                run_validation(it, epoch)
                if stopper.should_stop:
                    stop = "early_stop"
                    break
        if stop:
            break
        if not config.eval_every:
            run_validation(it, epoch)
            if stopper.should_stop:
                stop = "early_stop"
                break
    record.stop_reason = stop or "max_epochs"

    student.net.load_state_dict(best_student)
    if teacher is not None:
        teacher.net.load_state_dict(best_teacher)
    return TrainResult(student, teacher, record)


@dataclass
class MultiSeedReport:
    variant: str
    rows: list
    records: list = field(default_factory=list)

    def values(self, metric: str) -> list[float]:
        return [r[metric] for r in self.rows]

    def aggregate(self) -> dict:
        metrics = [k for k in self.rows[0] if k != "seed"]
        return {m: dict(zip(("mean", "std"), mean_std(self.values(m)))) for m in metrics}

    def to_dict(self) -> dict:
        return {"variant": self.variant, "rows": self.rows, "aggregate": self.aggregate()}


def run_multiseed(config: TrainConfig, datasets, variant: str = "full",
                  teacher_cfg: Optional[te.TeacherConfig] = None, student_cfg: Optional[st.StudentConfig] = None,
                  copy_move_params: Optional[CopyMoveParams] = None, seeds: Optional[Sequence[int]] = None,
                  keep_records: bool = False) -> MultiSeedReport:
    """Train once per seed and score each best checkpoint on the test split.

    ``datasets`` is ``(train, valid, test, imd)``.
    """
    seeds = tuple(seeds if seeds is not None else config.seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    mmd_train, mmd_valid, mmd_test, imd = datasets
    rows, records = [], []
    for s in seeds:
        res = train(mmd_train, mmd_valid, imd, config, seed=s, teacher_cfg=teacher_cfg,
                    student_cfg=student_cfg, copy_move_params=copy_move_params, variant=variant)
        rep = validate(res.student, mmd_test)
        rows.append({"seed": s, **rep.flat()})
        if keep_records:
            records.append(res.record)
        log.info("variant=%s seed=%d macro_f1=%.4f stop=%s", variant, s, rep.macro_f1, res.record.stop_reason)
    return MultiSeedReport(variant, rows, records)


def compare(report_a: MultiSeedReport, report_b: MultiSeedReport) -> dict:
    """Welch p-value per metric between two multi-seed reports."""
    out = {}
    for m in report_a.aggregate():
        a, b = report_a.values(m), report_b.values(m)
        out[m] = significance(a, b) if len(a) >= 2 and len(b) >= 2 else float("nan")
    return out


def save_student(state: st.StudentState, path) -> None:
    torch.save({"format": "mmdpu-student", "version": CHECKPOINT_VERSION,
                "config": asdict(state.config), "parameters": state.net.state_dict()}, path)


def load_student(path) -> st.StudentState:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "mmdpu-student" or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} student checkpoint")
    state = st.init_student(st.StudentConfig(**blob["config"]))
    state.net.load_state_dict(blob["parameters"])
    return state


def save_run(result: TrainResult, out_dir, test_report: Optional[EvalReport] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_student(result.student, out / "student.pt")
    if result.teacher is not None:
        te.save_teacher(result.teacher, out / "teacher.pt")
    result.record.write_jsonl(out / "run_record.jsonl")
    if test_report is not None:
        with open(out / "metrics.json", "w", encoding="utf-8") as fh:
            json.dump(test_report.to_dict(), fh, indent=2)
    return out
