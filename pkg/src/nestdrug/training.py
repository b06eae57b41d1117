"""Three-phase training: generic-context pretraining, differential-rate
fine-tuning with early stopping, continual multi-timescale updates, plus
few-shot single-row context adaptation.

Row 0 of every context table is the generic embedding and is pinned to the
zero vector: initialized to zero and masked out of every gradient step. This
makes "generic context" mean a zero embedding at inference and makes zero-step
few-shot adaptation an exact no-op relative to zero-shot.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensorcore as tc
from .datasets import ActivityRecord, Dataset
from .errors import (
    ConfigError,
    EmptyBatchError,
    EmptyDatasetError,
    InsufficientSupportError,
    NonFiniteLossError,
    ShapeError,
)
from .evalkit import roc_auc
from .nestmodel import NestModel, make_batch, param_group_names
from .tensorcore import Tensor

FINETUNE_RATES = {"backbone": 1e-5, "context": 1e-3, "film": 1e-3, "heads": 1e-4}
CONTINUAL_RATES = {"l3": 1e-3, "l1": 1e-4, "backbone": 1e-6, "other": 1e-4}


@dataclass
class PhaseConfig:
    phase: str  # "pretrain" | "finetune" | "continual"
    epochs: int = 30
    batch_size: int = 32
    patience: int = 20
    seed: int = 0
    lr: float = 3e-4  # pretrain single rate
    group_lrs: dict = field(default_factory=lambda: dict(FINETUNE_RATES))
    continual_lrs: dict = field(default_factory=lambda: dict(CONTINUAL_RATES))
    weight_decay: float = 0.01
    val_fraction: float = 0.1
    lr_min_ratio: float = 0.0
    task_id: int = 0
    lr_scale: float = 1.0  # desk-scale multiplier; preserves rate ratios
    # fraction of fine-tune samples trained with the generic context so the
    # zero-embedding pathway stays calibrated while target rows specialize
    context_dropout: float = 0.1

    def validate(self):
        if self.phase not in ("pretrain", "finetune", "continual"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if any(v < 0 for v in self.group_lrs.values()) or self.lr < 0:
            raise ConfigError("learning rates must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    phase: str
    seed: int
    epochs_run: int
    train_losses: list[float]
    val_losses: list[float]
    val_metrics: list[float]
    selected_epoch: int
    early_stopped: bool
    wall_time_s: float
    monitor: str
    final_val_metric: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def class_weights(labels: np.ndarray) -> np.ndarray:
    """Inverse class frequency normalized to mean one over the samples."""
    y = np.asarray(labels, dtype=np.int64)
    n = y.size
    weights = np.ones(n, dtype=np.float64)
    for cls in (0, 1):
        n_cls = int((y == cls).sum())
        if n_cls > 0:
            weights[y == cls] = n / (2.0 * n_cls)
    return weights


def loss_tensor(logits: Tensor, labels, task_kind: str,
                sample_weights: np.ndarray | None = None) -> Tensor:
    """Classification: class-weighted binary cross-entropy on logits.
    Regression: mean squared error."""
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0:
        raise EmptyBatchError("loss over zero samples")
    if logits.data.shape[0] != y.size:
        raise ShapeError(f"{logits.data.shape[0]} logits vs {y.size} labels")
    if task_kind == "classification":
        per = tc.sub(tc.softplus(logits), tc.mul(Tensor(y), logits))
        if sample_weights is not None:
            per = tc.mul(per, Tensor(sample_weights))
        return tc.tmean(per)
    if task_kind == "regression":
        diff = tc.sub(logits, Tensor(y))
        return tc.tmean(tc.mul(diff, diff))
    raise ConfigError(f"unknown task kind {task_kind!r}")


def _pin_generic_rows(model: NestModel):
    for name in ("ctx.l1", "ctx.l2", "ctx.l3"):
        model.params[name].data[0, :] = 0.0


def _mask_generic_grads(model: NestModel):
    for name in ("ctx.l1", "ctx.l2", "ctx.l3"):
        p = model.params[name]
        if p.grad is not None:
            p.grad[0, :] = 0.0


def _record_arrays(records: list[ActivityRecord], generic_context: bool):
    graphs = [r.graph for r in records]
    if generic_context:
        contexts = [[0, 0, 0] for _ in records]
    else:
        contexts = [[r.target_id, r.assay_id, r.round_id] for r in records]
    labels = np.array(
        [r.label if r.label is not None else r.pic50 for r in records],
        dtype=np.float64,
    )
    return graphs, contexts, labels


def _stratified_holdout(labels: np.ndarray, fraction: float,
                        rng: np.random.Generator):
    """(train_idx, val_idx); stratified for binary labels."""
    n = labels.size
    idx = np.arange(n)
    val: list[int] = []
    classes = np.unique(labels) if set(np.unique(labels)) <= {0.0, 1.0} else [None]
    if len(classes) > 1:
        for cls in classes:
            members = idx[labels == cls]
            members = members.copy()
            rng.shuffle(members)
            take = max(1, int(round(fraction * members.size)))
            val.extend(members[:take].tolist())
    else:
        shuffled = idx.copy()
        rng.shuffle(shuffled)
        val = shuffled[:max(1, int(round(fraction * n)))].tolist()
    val_set = set(val)
    train = np.array([i for i in range(n) if i not in val_set], dtype=np.int64)
    return train, np.array(sorted(val_set), dtype=np.int64)


def _evaluate(model: NestModel, graphs, contexts, labels, task_kind, task_id):
    scores = model.predict_scores(graphs, contexts, task_id)
    per = None
    if task_kind == "classification":
        z = scores
        losses = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z))) - labels * z
        loss = float(losses.mean())
        uniq = set(np.unique(labels))
        metric = roc_auc(scores, labels) if uniq == {0.0, 1.0} else float("nan")
    else:
        loss = float(np.mean((scores - labels) ** 2))
        metric = -loss
    return loss, metric, scores


def run_phase(model: NestModel, dataset: Dataset, cfg: PhaseConfig) -> TrainReport:
    """Shared training loop; pretrain/finetune differ in context handling,
    optimizer grouping, and the early-stopping monitor."""
    cfg.validate()
    if len(dataset) == 0:
        raise EmptyDatasetError("training on an empty dataset")
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    task_kind = model.config.tasks[cfg.task_id]
    generic = cfg.phase == "pretrain"
    graphs, contexts, labels = _record_arrays(dataset.records, generic)

    train_idx, val_idx = _stratified_holdout(labels, cfg.val_fraction, rng)
    tr_graphs = [graphs[i] for i in train_idx]
    tr_ctx = [contexts[i] for i in train_idx]
    tr_labels = labels[train_idx]
    va_graphs = [graphs[i] for i in val_idx]
    va_ctx = [contexts[i] for i in val_idx]
    va_labels = labels[val_idx]

    weights = None
    if task_kind == "classification":
        weights = class_weights(tr_labels)

    groups = param_group_names(model.params)
    if cfg.phase == "pretrain":
        group_list = [
            tc.ParamGroup(
                [model.params[n] for names in groups.values() for n in names],
                lr=cfg.lr * cfg.lr_scale, weight_decay=cfg.weight_decay,
                name="all")
        ]
    else:
        group_list = [
            tc.ParamGroup([model.params[n] for n in names],
                          lr=cfg.group_lrs.get(gname, 0.0) * cfg.lr_scale,
                          weight_decay=cfg.weight_decay, name=gname)
            for gname, names in groups.items() if names
        ]
    optimizer = tc.AdamW(group_list)
    trainable = [p for p in model.params.values() if p.requires_grad]

    _pin_generic_rows(model)
    monitor = "val_loss" if cfg.phase == "pretrain" or task_kind == "regression" \
        else "val_roc_auc"
    best_value = None
    best_epoch = -1
    best_arrays = None
    train_losses: list[float] = []
    val_losses: list[float] = []
    val_metrics: list[float] = []
    early_stopped = False
    total_steps = max(1, cfg.epochs * max(1, math.ceil(len(train_idx) / cfg.batch_size)))
    step = 0

    # the loss is checked for finiteness every step, so per-primitive NaN
    # scans are redundant inside the hot loop
    prev_checked = tc.set_checked_mode(False)
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(tr_graphs))
            epoch_losses = []
            for start in range(0, len(order), cfg.batch_size):
                sel = order[start:start + cfg.batch_size]
                batch = make_batch([tr_graphs[i] for i in sel])
                ctx = [tr_ctx[i] for i in sel]
                if not generic and cfg.context_dropout > 0.0:
                    drop = rng.random(len(ctx)) < cfg.context_dropout
                    ctx = [[0, 0, 0] if d else c for c, d in zip(ctx, drop)]
                logits = model.forward(batch, ctx, cfg.task_id, train=True, rng=rng)
                w = weights[sel] if weights is not None else None
                loss = loss_tensor(logits, tr_labels[sel], task_kind, w)
                lv = loss.item()
                if not math.isfinite(lv):
                    raise NonFiniteLossError(
                        f"epoch {epoch} step {step}: loss={lv}")
                epoch_losses.append(lv)
                tc.backward(loss, leaves=trainable)
                _mask_generic_grads(model)
                factor = tc.cosine_lr(step, total_steps, 1.0, cfg.lr_min_ratio)
                optimizer.step(lr_scale=factor)
                optimizer.zero_grad()
                step += 1
            train_losses.append(float(np.mean(epoch_losses)))
            vloss, vmetric, _ = _evaluate(model, va_graphs, va_ctx, va_labels,
                                          task_kind, cfg.task_id)
            val_losses.append(vloss)
            val_metrics.append(vmetric)
            value = -vloss if monitor == "val_loss" else vmetric
            if best_value is None or value > best_value:
                best_value = value
                best_epoch = epoch
                best_arrays = model.copy_arrays()
            elif epoch - best_epoch >= cfg.patience:
                early_stopped = True
                break
    finally:
        tc.set_checked_mode(prev_checked)

    if best_arrays is not None:
        model.restore_arrays(best_arrays)
    _, final_metric, _ = _evaluate(model, va_graphs, va_ctx, va_labels,
                                   task_kind, cfg.task_id)
    return TrainReport(
        phase=cfg.phase,
        seed=cfg.seed,
        epochs_run=len(train_losses),
        train_losses=train_losses,
        val_losses=val_losses,
        val_metrics=val_metrics,
        selected_epoch=best_epoch,
        early_stopped=early_stopped,
        wall_time_s=time.perf_counter() - t0,
        monitor=monitor,
        final_val_metric=final_metric,
    )


def pretrain(model: NestModel, dataset: Dataset, cfg: PhaseConfig) -> TrainReport:
    """Phase 1: every context id forced to 0, single learning rate."""
    if cfg.phase != "pretrain":
        raise ConfigError("config phase must be 'pretrain'")
    return run_phase(model, dataset, cfg)


def finetune(model: NestModel, dataset: Dataset, cfg: PhaseConfig) -> TrainReport:
    """Phase 2: four optimizer groups with differential learning rates."""
    if cfg.phase != "finetune":
        raise ConfigError("config phase must be 'finetune'")
    return run_phase(model, dataset, cfg)


def _continual_groups(model: NestModel, rates: dict, lr_scale: float,
                      weight_decay: float) -> list[tc.ParamGroup]:
    names = param_group_names(model.params)
    l3 = [model.params["ctx.l3"]] if model.params["ctx.l3"].requires_grad else []
    l1 = [model.params["ctx.l1"]]
    backbone = [model.params[n] for n in names["backbone"]]
    other_names = [n for n in names["context"] if n not in ("ctx.l1", "ctx.l3")]
    other = [model.params[n] for n in other_names]
    other += [model.params[n] for n in names["film"] + names["heads"]]
    return [
        tc.ParamGroup(l3, lr=rates.get("l3", 0.0) * lr_scale,
                      weight_decay=weight_decay, name="l3"),
        tc.ParamGroup(l1, lr=rates.get("l1", 0.0) * lr_scale,
                      weight_decay=weight_decay, name="l1"),
        tc.ParamGroup(backbone, lr=rates.get("backbone", 0.0) * lr_scale,
                      weight_decay=weight_decay, name="backbone"),
        tc.ParamGroup(other, lr=rates.get("other", 0.0) * lr_scale,
                      weight_decay=weight_decay, name="other"),
    ]


def continual_update(model: NestModel, rounds: list[list[ActivityRecord]],
                     cfg: PhaseConfig, passes: int = 1) -> list[dict]:
    """One short update pass after each revealed round.

    Rate ordering lr(L3) > lr(L1) > lr(backbone); rounds are processed in the
    order given. Returns one summary dict per round.
    """
    if cfg.phase != "continual":
        raise ConfigError("config phase must be 'continual'")
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    task_kind = model.config.tasks[cfg.task_id]
    optimizer = tc.AdamW(_continual_groups(model, cfg.continual_lrs,
                                           cfg.lr_scale, cfg.weight_decay))
    trainable = [p for p in model.params.values() if p.requires_grad]
    _pin_generic_rows(model)
    summaries = []
    for round_no, records in enumerate(rounds):
        if not records:
            summaries.append({"round": round_no, "n": 0, "mean_loss": None})
            continue
        graphs, contexts, labels = _record_arrays(records, generic_context=False)
        weights = class_weights(labels) if task_kind == "classification" else None
        losses = []
        for _ in range(passes):
            order = rng.permutation(len(graphs))
            for start in range(0, len(order), cfg.batch_size):
                sel = order[start:start + cfg.batch_size]
                batch = make_batch([graphs[i] for i in sel])
                ctx = [contexts[i] for i in sel]
                logits = model.forward(batch, ctx, cfg.task_id, train=True, rng=rng)
                w = weights[sel] if weights is not None else None
                loss = loss_tensor(logits, labels[sel], task_kind, w)
                lv = loss.item()
                if not math.isfinite(lv):
                    raise NonFiniteLossError(f"round {round_no}: loss={lv}")
                losses.append(lv)
                tc.backward(loss, leaves=trainable)
                _mask_generic_grads(model)
                optimizer.step()
                optimizer.zero_grad()
        summaries.append({
            "round": round_no, "n": len(records),
            "mean_loss": float(np.mean(losses)),
        })
    return summaries


def few_shot_adapt_l1(model: NestModel, support: list[ActivityRecord],
                      heldout: list[ActivityRecord], shots: int,
                      steps: int = 100, lr: float = 1e-2,
                      seed: int = 0) -> dict:
    """Adapt a single fresh program-context row from a small support set.

    Everything but that one table row stays frozen. The row starts at zero so
    zero adaptation steps reproduce the zero-shot (generic) behavior exactly.
    Returns the adapted row plus zero-shot/adapted AUC and their delta on the
    held-out records.
    """
    targets = {r.target_id for r in support}
    if len(targets) != 1:
        raise InsufficientSupportError("support must come from one target")
    target = targets.pop()
    if target <= 0:
        raise InsufficientSupportError("target id 0 is the generic context")
    if len(support) < shots:
        raise InsufficientSupportError(
            f"need {shots} support rows, got {len(support)}")
    rng = np.random.default_rng(seed)
    pick = rng.permutation(len(support))[:shots]
    chosen = [support[i] for i in pick]

    task_id = 0
    task_kind = model.config.tasks[task_id]
    _pin_generic_rows(model)
    l1 = model.params["ctx.l1"]
    saved_row = l1.data[target].copy()
    l1.data[target] = 0.0

    graphs_h, _, labels_h = _record_arrays(heldout, generic_context=False)
    ctx_generic = [[0, r.assay_id, r.round_id] for r in heldout]
    ctx_target = [[target, r.assay_id, r.round_id] for r in heldout]

    def auc_with(ctxs):
        scores = model.predict_scores(graphs_h, ctxs, task_id)
        return roc_auc(scores, labels_h)

    zero_shot = auc_with(ctx_generic)

    graphs_s, _, labels_s = _record_arrays(chosen, generic_context=False)
    ctx_s = [[target, r.assay_id, r.round_id] for r in chosen]
    weights = class_weights(labels_s) if task_kind == "classification" \
        and len(set(labels_s.tolist())) > 1 else None
    optimizer = tc.AdamW([tc.ParamGroup([l1], lr=lr, weight_decay=0.0,
                                        name="l1_row")])
    batch = make_batch(graphs_s)
    for _ in range(steps):
        logits = model.forward(batch, ctx_s, task_id, train=False)
        loss = loss_tensor(logits, labels_s, task_kind, weights)
        tc.backward(loss, leaves=[l1])
        l1.grad[0, :] = 0.0  # generic row stays pinned
        mask = np.zeros(l1.data.shape[0], dtype=bool)
        mask[target] = True
        l1.grad[~mask, :] = 0.0
        optimizer.step()
        optimizer.zero_grad()

    adapted_row = l1.data[target].copy()
    adapted = auc_with(ctx_target)
    l1.data[target] = saved_row  # leave the model as found
    return {
        "target": target,
        "shots": shots,
        "steps": steps,
        "zero_shot_auc": float(zero_shot),
        "adapted_auc": float(adapted),
        "delta": float(adapted - zero_shot),
        "adapted_row": adapted_row,
        "row_norm": float(np.linalg.norm(adapted_row)),
    }
