"""Benchmark forensics: exact-overlap leakage, structural-bias probing via
nearest-neighbor similarity, and cross-target transfer of fingerprint models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .baselines import (
    ForestConfig,
    fingerprints_to_matrix,
    fit_forest,
    predict_proba,
)
from .errors import EmptySetError
from .evalkit import roc_auc
from .fingerprint import Fingerprint, morgan_fingerprint, nn_similarity, one_nn_scores


@dataclass
class LeakageResult:
    active_leakage_pct: float
    decoy_leakage_pct: float
    leaked_actives: list[str]
    leaked_decoys: list[str]

    def to_dict(self) -> dict:
        return {
            "active_leakage_pct": self.active_leakage_pct,
            "decoy_leakage_pct": self.decoy_leakage_pct,
            "n_leaked_actives": len(self.leaked_actives),
            "n_leaked_decoys": len(self.leaked_decoys),
        }


def _texts(items) -> list[str]:
    return [x.text if hasattr(x, "text") else str(x) for x in items]


def leakage_report(train, eval_actives, eval_decoys) -> LeakageResult:
    """Exact canonical-form overlap between training and evaluation sets.

    All three inputs must be canonical forms produced with identical
    normalization settings; the caller owns that consistency.
    """
    train_set = set(_texts(train))
    actives = _texts(eval_actives)
    decoys = _texts(eval_decoys)
    if not train_set or not actives:
        raise EmptySetError("train and eval_actives must be non-empty")
    leaked_a = [a for a in actives if a in train_set]
    leaked_d = [d for d in decoys if d in train_set]
    return LeakageResult(
        active_leakage_pct=100.0 * len(leaked_a) / len(actives),
        decoy_leakage_pct=(100.0 * len(leaked_d) / len(decoys)) if decoys else 0.0,
        leaked_actives=leaked_a,
        leaked_decoys=leaked_d,
    )


@dataclass
class StructuralBiasResult:
    one_nn_auc: float
    active_active_sim: float
    decoy_active_sim: float
    gap: float

    def to_dict(self) -> dict:
        return {
            "one_nn_auc": self.one_nn_auc,
            "active_active_sim": self.active_active_sim,
            "decoy_active_sim": self.decoy_active_sim,
            "gap": self.gap,
        }


def structural_bias_audit(train_actives: list[Fingerprint],
                          test_actives: list[Fingerprint],
                          test_decoys: list[Fingerprint]) -> StructuralBiasResult:
    """Zero-parameter nearest-neighbor probe of benchmark separability."""
    if not train_actives or not test_actives or not test_decoys:
        raise EmptySetError("all three fingerprint sets must be non-empty")
    scores_a = one_nn_scores(train_actives, test_actives)
    scores_d = one_nn_scores(train_actives, test_decoys)
    scores = np.concatenate([scores_a, scores_d])
    labels = np.concatenate([np.ones(len(scores_a), dtype=np.int64),
                             np.zeros(len(scores_d), dtype=np.int64)])
    aa = float(np.mean(scores_a))
    da = float(np.mean(scores_d))
    return StructuralBiasResult(
        one_nn_auc=roc_auc(scores, labels),
        active_active_sim=aa,
        decoy_active_sim=da,
        gap=aa - da,
    )


def cross_target_transfer_audit(datasets_by_target: dict[int, "object"],
                                forest_config: ForestConfig,
                                fp_radius: int = 2,
                                fp_nbits: int = 2048) -> dict:
    """AUC matrix: entry (i, j) evaluates a forest fit on target i's rows
    against target j's rows; the diagonal is same-target performance."""
    targets = sorted(datasets_by_target)
    if len(targets) < 2:
        raise EmptySetError("need at least two targets")
    features = {}
    labels = {}
    for t in targets:
        ds = datasets_by_target[t]
        fps = [morgan_fingerprint(r.graph, fp_radius, fp_nbits) for r in ds.records]
        features[t] = fingerprints_to_matrix(fps)
        labels[t] = ds.labels()
    matrix = np.zeros((len(targets), len(targets)))
    for i, ti in enumerate(targets):
        model = fit_forest(features[ti], labels[ti], forest_config)
        for j, tj in enumerate(targets):
            scores = predict_proba(model, features[tj])
            matrix[i, j] = roc_auc(scores, labels[tj])
    off_diag = matrix[~np.eye(len(targets), dtype=bool)]
    return {
        "targets": targets,
        "matrix": matrix,
        "diagonal_mean": float(np.mean(np.diag(matrix))),
        "off_diagonal_mean": float(np.mean(off_diag)),
    }


@dataclass
class AuditReport:
    """Per-target forensic rows plus the settings that produced them."""

    rows: list[dict] = field(default_factory=list)
    fp_radius: int = 2
    fp_nbits: int = 2048
    strip_stereo: bool = False
    threshold_pic50: float = 6.0
    cross_target: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "settings": {
                "fp_radius": self.fp_radius,
                "fp_nbits": self.fp_nbits,
                "strip_stereo": self.strip_stereo,
                "threshold_pic50": self.threshold_pic50,
            },
            "rows": self.rows,
        }
        if self.cross_target is not None:
            ct = dict(self.cross_target)
            ct["matrix"] = np.asarray(ct["matrix"]).tolist()
            out["cross_target"] = ct
        return out

    def mean_active_leakage(self) -> float:
        vals = [r["active_leakage_any_pct"] for r in self.rows]
        return float(np.mean(vals)) if vals else 0.0


AUDIT_CSV_COLUMNS = [
    "target_id", "n_eval_actives", "n_eval_decoys", "n_train_any",
    "n_train_actives", "active_leakage_any_pct", "active_leakage_thresholded_pct",
    "decoy_leakage_any_pct", "one_nn_auc", "active_active_sim",
    "decoy_active_sim", "gap",
]
