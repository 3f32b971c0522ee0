"""Phenotype metric, comorbidity correction distance, and the modified KNN
scheme that picks the training subjects most similar to a query subject.

The phenotype metric is a robust-scale-normalized weighted L1 distance over
age and BMI plus a gender-mismatch indicator. Candidate pruning follows a
two-step rule: rank the database by phenotype distance, keep the nearest
k + k' subjects, then drop the k' candidates with the worst comorbidity
mismatch (falling back to phenotype distance when fewer than k' candidates
mismatch at all). All ties are broken on subject id so selection is
deterministic and independent of database order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ApneaScreenError
from .recording_store import PhenotypeProfile, Subject

# Consistency factor making the MAD comparable to a standard deviation
# under normality.
MAD_TO_SIGMA = 1.4826


class DatabaseTooSmall(ApneaScreenError):
    pass


@dataclass(frozen=True)
class KnnConfig:
    k: int = 15
    k_prime: int = 5
    gender_weight: float = 1.0
    age_weight: float = 1.0
    bmi_weight: float = 1.0

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.k_prime < 0:
            raise ValueError("k_prime must be non-negative")
        if min(self.gender_weight, self.age_weight, self.bmi_weight) < 0:
            raise ValueError("metric weights must be non-negative")


@dataclass(frozen=True)
class MetricScales:
    age_scale: float
    bmi_scale: float

    def __post_init__(self):
        if self.age_scale <= 0 or self.bmi_scale <= 0:
            raise ValueError("metric scales must be positive")


def _median(values: list[float]) -> float:
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    if n % 2 == 1:
        return ordered[mid]
    return 0.5 * (ordered[mid - 1] + ordered[mid])


def _robust_scale(values: list[float]) -> float:
    med = _median(values)
    mad = _median([abs(v - med) for v in values])
    return MAD_TO_SIGMA * mad if mad > 0 else 1.0


def compute_scales(profiles: Sequence[PhenotypeProfile]) -> MetricScales:
    """Robust age/BMI scales from a reference set (never from the query)."""
    if not profiles:
        raise ValueError("cannot compute scales from an empty reference set")
    return MetricScales(
        age_scale=_robust_scale([p.age for p in profiles]),
        bmi_scale=_robust_scale([p.bmi for p in profiles]),
    )


def phenotype_distance(
    a: PhenotypeProfile, b: PhenotypeProfile, scales: MetricScales, cfg: KnnConfig
) -> float:
    d = cfg.age_weight * abs(a.age - b.age) / scales.age_scale
    d += cfg.bmi_weight * abs(a.bmi - b.bmi) / scales.bmi_scale
    if a.gender != b.gender:
        d += cfg.gender_weight
    return d


def correction_distance(a: PhenotypeProfile, b: PhenotypeProfile) -> int:
    """Hamming distance over the three comorbidity flags."""
    return sum(fa != fb for fa, fb in zip(a.comorbidities, b.comorbidities))


def select_neighbors(
    query: PhenotypeProfile,
    database: Sequence[Subject],
    cfg: KnnConfig,
    scales: MetricScales,
) -> list[str]:
    """Return the ids of the k database subjects most similar to ``query``.

    Step 1 keeps the k + k' phenotype-nearest subjects (ties by id).
    Step 2 prunes k' of them by comorbidity mismatch: if at least k'
    candidates have a positive correction distance, the k' worst are removed
    (ties: larger phenotype distance first, then id descending); otherwise
    every mismatching candidate is removed and the remainder of the quota is
    filled by largest phenotype distance. The survivors are returned in
    phenotype-distance order.
    """
    if len(database) < cfg.k + cfg.k_prime:
        raise DatabaseTooSmall(
            f"need at least k + k' = {cfg.k + cfg.k_prime} subjects, have {len(database)}"
        )

    ranked = sorted(
        database,
        key=lambda s: (phenotype_distance(query, s.profile, scales, cfg), s.id),
    )
    candidates = ranked[: cfg.k + cfg.k_prime]

    pd_of = {s.id: phenotype_distance(query, s.profile, scales, cfg) for s in candidates}
    cd_of = {s.id: correction_distance(query, s.profile) for s in candidates}

    mismatching = [s for s in candidates if cd_of[s.id] > 0]
    removal_key = lambda s: (cd_of[s.id], pd_of[s.id], s.id)  # noqa: E731
    if len(mismatching) >= cfg.k_prime:
        pruned = sorted(candidates, key=removal_key, reverse=True)[: cfg.k_prime]
    else:
        matching = [s for s in candidates if cd_of[s.id] == 0]
        extra = sorted(matching, key=lambda s: (pd_of[s.id], s.id), reverse=True)
        pruned = mismatching + extra[: cfg.k_prime - len(mismatching)]

    pruned_ids = {s.id for s in pruned}
    return [s.id for s in candidates if s.id not in pruned_ids]
