"""Desk-scale experiment protocols: context ablation, fusion comparison,
data-scarcity transfer, and checkpoint evaluation grids.

The desk protocol shrinks epochs and widths while keeping the learning-rate
ratios of the full recipe; the ratios, not the magnitudes, carry the method.
All randomness is derived from one root seed, split per component with a
stable hash so run grids are reconstructible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import ForestConfig, RFExperimentConfig, per_target_rf_experiment
from .datasets import Dataset, synth_structured_shift
from .errors import ParameterError
from .evalkit import (
    MetricBundle,
    SplitPlan,
    classification_bundle,
    paired_t_test,
    roc_auc,
    stratified_kfold,
)
from .nestmodel import ModelConfig, NestModel
from .training import PhaseConfig, finetune, pretrain


def derive_seed(root: int, *tags) -> int:
    """Stable component seed from a root seed and string tags."""
    text = f"{root}:" + ":".join(str(t) for t in tags)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % (2 ** 31)


@dataclass
class DeskProtocol:
    """Shrunken training recipe for laptop-scale runs."""

    n_targets: int = 4
    n_per_target: int = 500
    shift_strength: float = 0.8
    n_folds: int = 5
    test_fold: int = 0
    hidden: int = 32
    layers: int = 2
    l1_dim: int = 16
    l2_dim: int = 8
    l3_dim: int = 8
    film_hidden: int = 64
    head_hidden: tuple[int, ...] = (64, 32)
    pre_epochs: int = 6
    pre_lr: float = 3e-3
    ft_epochs: int = 16
    lr_scale: float = 45.0
    lr_min_ratio: float = 0.25
    batch_size: int = 128
    context_dropout: float = 0.08

    def model_config(self, fusion: str = "film") -> ModelConfig:
        return ModelConfig(
            hidden=self.hidden,
            layers=self.layers,
            l1_capacity=self.n_targets + 1,
            l2_capacity=2,
            l3_capacity=4,
            l1_dim=self.l1_dim,
            l2_dim=self.l2_dim,
            l3_dim=self.l3_dim,
            film_hidden=self.film_hidden,
            head_hidden=self.head_hidden,
            fusion=fusion,
        )


def split_dataset(dataset: Dataset, n_folds: int, test_fold: int,
                  seed: int) -> tuple[list, list]:
    plan = stratified_kfold(dataset.labels(), n_folds, seed=seed)
    train_idx, test_idx = plan.fold_indices(test_fold)
    return ([dataset.records[i] for i in train_idx],
            [dataset.records[i] for i in test_idx])


def train_context_model(train_records: list, fusion: str, seed: int,
                        protocol: DeskProtocol) -> NestModel:
    """Pretrain the bare architecture with generic context, splice in the
    fusion module, then fine-tune with differential rates.

    Scale/shift variants initialize as the identity, so splicing changes
    nothing for them. concat_frozen is the "not jointly trained" baseline:
    its random projection is inserted into the fully trained bare model and
    nothing ever trains with it. concat_trained splices before fine-tuning
    and lets the projection train.
    """
    base = NestModel.build(protocol.model_config("none"), seed=seed)
    train_ds = Dataset(records=train_records)
    pretrain(base, train_ds, PhaseConfig(
        phase="pretrain", epochs=protocol.pre_epochs,
        batch_size=protocol.batch_size, seed=derive_seed(seed, "pretrain"),
        lr=protocol.pre_lr))

    def splice(variant: str) -> NestModel:
        spliced = NestModel.build(protocol.model_config(variant), seed=seed)
        for name, p in base.params.items():
            spliced.params[name].data = p.data.copy()
        return spliced

    ft_cfg = PhaseConfig(
        phase="finetune", epochs=protocol.ft_epochs,
        batch_size=protocol.batch_size, seed=derive_seed(seed, "finetune"),
        lr_scale=protocol.lr_scale, lr_min_ratio=protocol.lr_min_ratio,
        context_dropout=protocol.context_dropout)

    if fusion == "concat_frozen":
        finetune(base, train_ds, ft_cfg)
        return splice(fusion)
    model = base if fusion == "none" else splice(fusion)
    finetune(model, train_ds, ft_cfg)
    return model


def correct_vs_generic(model: NestModel, test_records: list) -> dict:
    """Evaluate one trained model twice: correct ids vs generic program id."""
    graphs = [r.graph for r in test_records]
    labels = np.array([r.label for r in test_records], dtype=np.float64)
    ctx_correct = [[r.target_id, r.assay_id, r.round_id] for r in test_records]
    ctx_generic = [[0, r.assay_id, r.round_id] for r in test_records]
    sc = model.predict_scores(graphs, ctx_correct)
    sg = model.predict_scores(graphs, ctx_generic)
    per_target = {}
    for t in sorted({r.target_id for r in test_records}):
        sel = [i for i, r in enumerate(test_records) if r.target_id == t]
        yt = labels[sel]
        per_target[t] = {
            "auc_correct": roc_auc(sc[sel], yt),
            "auc_generic": roc_auc(sg[sel], yt),
        }
    return {
        "auc_correct": roc_auc(sc, labels),
        "auc_generic": roc_auc(sg, labels),
        "mean_target_auc_correct": float(np.mean(
            [v["auc_correct"] for v in per_target.values()])),
        "mean_target_auc_generic": float(np.mean(
            [v["auc_generic"] for v in per_target.values()])),
        "per_target": per_target,
    }


def l1_ablation(shift_strength: float, seeds: list[int],
                protocol: DeskProtocol | None = None,
                root_seed: int = 0) -> dict:
    """Correct-vs-generic program context over several seeded runs.

    Each seed regenerates data, splits, trains a modulated model once, and
    evaluates both context modes on the held-out fold. The paired t-test runs
    on per-seed overall deltas with Bonferroni scaling by the target count.
    """
    protocol = protocol or DeskProtocol(shift_strength=shift_strength)
    rows = []
    overall_deltas = []
    models = {}
    for seed in seeds:
        ds = synth_structured_shift(
            protocol.n_targets, protocol.n_per_target, shift_strength,
            seed=derive_seed(root_seed, "data", seed))
        train, test = split_dataset(ds, protocol.n_folds, protocol.test_fold,
                                    seed=derive_seed(root_seed, "split", seed))
        model = train_context_model(train, "film", seed, protocol)
        models[seed] = (model, train, test)
        res = correct_vs_generic(model, test)
        overall_deltas.append(res["auc_correct"] - res["auc_generic"])
        for t, vals in res["per_target"].items():
            rows.append({
                "target_id": t, "seed": seed,
                "auc_correct": vals["auc_correct"],
                "auc_generic": vals["auc_generic"],
                "delta": vals["auc_correct"] - vals["auc_generic"],
            })
    ttest = paired_t_test(overall_deltas, m_comparisons=protocol.n_targets) \
        if len(overall_deltas) >= 2 else None
    return {
        "rows": rows,
        "overall_deltas": overall_deltas,
        "mean_delta": float(np.mean(overall_deltas)),
        "ttest": ttest,
        "models": models,
    }


def fusion_comparison(variants: list[str], seeds: list[int],
                      protocol: DeskProtocol | None = None,
                      root_seed: int = 0,
                      reuse_models: dict | None = None) -> dict:
    """Mean correct-context AUC per fusion variant on shared data/splits.

    ``reuse_models`` lets the caller inject already-trained models keyed by
    (variant, seed) so the modulated runs from an ablation are not repeated.
    """
    protocol = protocol or DeskProtocol()
    reuse_models = reuse_models or {}
    rows = []
    for seed in seeds:
        ds = synth_structured_shift(
            protocol.n_targets, protocol.n_per_target, protocol.shift_strength,
            seed=derive_seed(root_seed, "data", seed))
        train, test = split_dataset(ds, protocol.n_folds, protocol.test_fold,
                                    seed=derive_seed(root_seed, "split", seed))
        for variant in variants:
            key = (variant, seed)
            if key in reuse_models:
                model = reuse_models[key]
            else:
                model = train_context_model(train, variant, seed, protocol)
            res = correct_vs_generic(model, test)
            rows.append({"variant": variant, "seed": seed,
                         "auc": res["mean_target_auc_correct"]})
    means = {}
    for variant in variants:
        vals = [r["auc"] for r in rows if r["variant"] == variant]
        means[variant] = float(np.mean(vals))
    return {"rows": rows, "means": means}


def data_scarcity_comparison(seeds: list[int],
                             protocol: DeskProtocol | None = None,
                             scarce_target: int | None = None,
                             scarce_rows: int = 30,
                             rf_trees: int = 150,
                             root_seed: int = 0) -> dict:
    """Multi-task context model vs per-target forest on a starved target.

    The scarce target keeps only ``scarce_rows`` training rows; both methods
    are evaluated on that target's full held-out fold.
    """
    protocol = protocol or DeskProtocol()
    scarce = scarce_target or protocol.n_targets
    rows = []
    for seed in seeds:
        ds = synth_structured_shift(
            protocol.n_targets, protocol.n_per_target, protocol.shift_strength,
            seed=derive_seed(root_seed, "data", seed))
        train, test = split_dataset(ds, protocol.n_folds, protocol.test_fold,
                                    seed=derive_seed(root_seed, "split", seed))
        rng = np.random.default_rng(derive_seed(root_seed, "scarce", seed))
        scarce_train = [r for r in train if r.target_id == scarce]
        other_train = [r for r in train if r.target_id != scarce]
        keep = rng.permutation(len(scarce_train))[:scarce_rows]
        kept = [scarce_train[i] for i in keep]
        reduced_train = other_train + kept

        model = train_context_model(reduced_train, "film", seed, protocol)
        test_scarce = [r for r in test if r.target_id == scarce]
        graphs = [r.graph for r in test_scarce]
        labels = np.array([r.label for r in test_scarce], dtype=np.float64)
        ctx = [[r.target_id, r.assay_id, r.round_id] for r in test_scarce]
        film_auc = roc_auc(model.predict_scores(graphs, ctx), labels)

        from .baselines import fingerprints_to_matrix, fit_forest, predict_proba
        from .fingerprint import morgan_fingerprint
        fps_train = [morgan_fingerprint(r.graph) for r in kept]
        y_train = np.array([r.label for r in kept], dtype=np.int64)
        fps_test = [morgan_fingerprint(r.graph) for r in test_scarce]
        X_train = fingerprints_to_matrix(fps_train)
        X_test = fingerprints_to_matrix(fps_test)
        forest = fit_forest(X_train, y_train, ForestConfig(
            n_trees=rf_trees, seed=derive_seed(root_seed, "rf", seed)))
        rf_auc = roc_auc(predict_proba(forest, X_test), labels)

        rows.append({
            "seed": seed, "target_id": scarce, "n_scarce_train": len(kept),
            "film_auc": film_auc, "rf_auc": rf_auc,
            "delta": film_auc - rf_auc,
        })
    deltas = [r["delta"] for r in rows]
    return {"rows": rows, "mean_delta": float(np.mean(deltas)),
            "mean_film": float(np.mean([r["film_auc"] for r in rows])),
            "mean_rf": float(np.mean([r["rf_auc"] for r in rows]))}


def evaluate_grid(model: NestModel, dataset: Dataset, plan: SplitPlan,
                  task_id: int = 0) -> list[dict]:
    """MetricBundle rows per (target, fold) or per (target, year bucket)."""
    rows = []
    records = dataset.records

    def bundle_rows(record_idx, tag_name, tag_value):
        recs = [records[i] for i in record_idx]
        by_target: dict[int, list] = {}
        for r in recs:
            by_target.setdefault(r.target_id, []).append(r)
        for t in sorted(by_target):
            sub = by_target[t]
            labels = np.array([r.label for r in sub], dtype=np.int64)
            if len(set(labels.tolist())) < 2:
                continue
            graphs = [r.graph for r in sub]
            ctx = [[r.target_id, r.assay_id, r.round_id] for r in sub]
            scores = model.predict_scores(graphs, ctx, task_id)
            b = classification_bundle(1.0 / (1.0 + np.exp(-scores)), labels)
            row = {"target_id": t, tag_name: tag_value}
            row.update(b.to_dict())
            rows.append(row)

    if plan.kind == "kfold":
        for fold in range(plan.k):
            _, test_idx = plan.fold_indices(fold)
            bundle_rows(test_idx, "fold", fold)
    else:
        for year in sorted(plan.year_buckets):
            bundle_rows(plan.year_buckets[year], "year", year)
    return rows
