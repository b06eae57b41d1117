"""Iterative screening replay: rank, select the top fraction, reveal labels,
optionally retrain, repeat. Enrichment is reported against the analytic
random baseline (expected hit rate of blind selection equals pool
prevalence), which removes baseline variance from the denominator; a
paired-runs mode exists for validating that expectation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .datasets import ActivityRecord
from .errors import EmptyPoolError, ParameterError, ScorerFailureError
from .fingerprint import morgan_fingerprint, nn_similarity

Scorer = Callable[[list[ActivityRecord], list[ActivityRecord], np.random.Generator],
                  np.ndarray]


@dataclass
class Campaign:
    pool: list[ActivityRecord]
    rounds: int
    select_fraction: float = 0.30
    scorer: str | Scorer = "random"
    seed: int = 0
    retrain_hook: Callable[[list[ActivityRecord], int], None] | None = None

    def validate(self):
        if not self.pool:
            raise EmptyPoolError("campaign pool is empty")
        if not 0.0 < self.select_fraction <= 1.0:
            raise ParameterError("select_fraction must be in (0, 1]")
        if self.rounds < 1:
            raise ParameterError("rounds must be >= 1")


@dataclass
class RoundResult:
    round_no: int
    selected_ids: list[int]
    hits: int
    hit_rate: float


@dataclass
class CampaignResult:
    rounds: list[RoundResult]
    revealed_order: list[int]
    revealed_hits: list[int]
    pool_size: int
    pool_actives: int
    cumulative_hits: int
    cumulative_selected: int
    model_hit_rate: float
    random_hit_rate: float  # analytic expectation = pool prevalence
    enrichment: float

    def to_dict(self) -> dict:
        return {
            "pool_size": self.pool_size,
            "pool_actives": self.pool_actives,
            "cumulative_hits": self.cumulative_hits,
            "cumulative_selected": self.cumulative_selected,
            "model_hit_rate": self.model_hit_rate,
            "random_hit_rate": self.random_hit_rate,
            "enrichment": self.enrichment,
            "rounds": [
                {"round": r.round_no, "selected": len(r.selected_ids),
                 "hits": r.hits, "hit_rate": r.hit_rate}
                for r in self.rounds
            ],
        }


def random_scorer(remaining, revealed, rng) -> np.ndarray:
    return rng.random(len(remaining))


def oracle_scorer(remaining, revealed, rng) -> np.ndarray:
    return np.array([float(r.label) for r in remaining])


class FingerprintNNScorer:
    """Scores by best similarity to the revealed hits; model-free reference.

    The active set is rebuilt from revealed hits each round; until a hit is
    revealed every candidate scores zero.
    """

    def __init__(self, radius: int = 2, nbits: int = 2048):
        self.radius = radius
        self.nbits = nbits
        self._cache: dict[str, object] = {}

    def _fp(self, record: ActivityRecord):
        key = record.canonical.text
        if key not in self._cache:
            self._cache[key] = morgan_fingerprint(record.graph, self.radius,
                                                  self.nbits)
        return self._cache[key]

    def __call__(self, remaining, revealed, rng) -> np.ndarray:
        active_fps = [self._fp(r) for r in revealed if r.label == 1]
        if not active_fps:
            return np.zeros(len(remaining))
        return np.array([nn_similarity(self._fp(r), active_fps)[0]
                         for r in remaining])


class ModelScorer:
    """Scores with a trained model; pairs with a continual-update hook."""

    def __init__(self, model, task_id: int = 0):
        self.model = model
        self.task_id = task_id

    def __call__(self, remaining, revealed, rng) -> np.ndarray:
        graphs = [r.graph for r in remaining]
        contexts = [[r.target_id, r.assay_id, r.round_id] for r in remaining]
        return self.model.predict_scores(graphs, contexts, self.task_id)


_BUILTIN_SCORERS = {
    "random": random_scorer,
    "oracle": oracle_scorer,
}


def _resolve_scorer(spec) -> Scorer:
    if callable(spec):
        return spec
    if spec in _BUILTIN_SCORERS:
        return _BUILTIN_SCORERS[spec]
    if spec == "fingerprint-nn":
        return FingerprintNNScorer()
    raise ParameterError(f"unknown scorer {spec!r}")


def replay_campaign(campaign: Campaign) -> CampaignResult:
    """Deterministic greedy top-k replay; ties broken by stable pool order."""
    campaign.validate()
    scorer = _resolve_scorer(campaign.scorer)
    rng = np.random.default_rng(campaign.seed)
    remaining = list(range(len(campaign.pool)))
    revealed: list[ActivityRecord] = []
    revealed_order: list[int] = []
    revealed_hits: list[int] = []
    rounds: list[RoundResult] = []
    pool_actives = sum(1 for r in campaign.pool if r.label == 1)

    for round_no in range(campaign.rounds):
        if not remaining:
            break
        records = [campaign.pool[i] for i in remaining]
        try:
            scores = np.asarray(scorer(records, revealed, rng), dtype=np.float64)
        except Exception as exc:  # surface the round for debugging
            raise ScorerFailureError(f"round {round_no}: {exc}") from exc
        if scores.shape[0] != len(remaining):
            raise ScorerFailureError(
                f"round {round_no}: scorer returned {scores.shape[0]} scores "
                f"for {len(remaining)} candidates")
        k = math.ceil(campaign.select_fraction * len(remaining))
        order = np.argsort(-scores, kind="stable")[:k]
        chosen = [remaining[i] for i in order]
        hits = 0
        for idx in chosen:
            rec = campaign.pool[idx]
            revealed.append(rec)
            revealed_order.append(idx)
            revealed_hits.append(int(rec.label))
            hits += int(rec.label)
        chosen_set = set(chosen)
        remaining = [i for i in remaining if i not in chosen_set]
        rounds.append(RoundResult(
            round_no=round_no, selected_ids=chosen, hits=hits,
            hit_rate=hits / len(chosen),
        ))
        if campaign.retrain_hook is not None:
            campaign.retrain_hook([campaign.pool[i] for i in chosen], round_no)

    cum_sel = sum(len(r.selected_ids) for r in rounds)
    cum_hits = sum(r.hits for r in rounds)
    prevalence = pool_actives / len(campaign.pool)
    model_rate = cum_hits / cum_sel if cum_sel else 0.0
    return CampaignResult(
        rounds=rounds,
        revealed_order=revealed_order,
        revealed_hits=revealed_hits,
        pool_size=len(campaign.pool),
        pool_actives=pool_actives,
        cumulative_hits=cum_hits,
        cumulative_selected=cum_sel,
        model_hit_rate=model_rate,
        random_hit_rate=prevalence,
        enrichment=model_rate / prevalence if prevalence > 0 else math.inf,
    )


NOT_REACHED = None


def experiments_to_n_hits(result: CampaignResult, n: int):
    """Revealed compounds (in reveal order) until the n-th hit; None if the
    campaign never reaches n hits."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    count = 0
    for i, hit in enumerate(result.revealed_hits, start=1):
        count += hit
        if count >= n:
            return i
    return NOT_REACHED


def enrichment_summary(results: list[CampaignResult]) -> dict:
    if not results:
        raise ParameterError("no campaign results")
    enrich = [r.enrichment for r in results]
    model_rates = [r.model_hit_rate for r in results]
    random_rates = [r.random_hit_rate for r in results]
    return {
        "n_campaigns": len(results),
        "per_campaign": [
            {"enrichment": r.enrichment, "model_hit_rate": r.model_hit_rate,
             "random_hit_rate": r.random_hit_rate,
             "hits": r.cumulative_hits, "selected": r.cumulative_selected}
            for r in results
        ],
        "mean_enrichment": float(np.mean(enrich)),
        "mean_model_hit_rate": float(np.mean(model_rates)),
        "mean_random_hit_rate": float(np.mean(random_rates)),
    }
