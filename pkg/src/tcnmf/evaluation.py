"""Scoring clusters and network edges against known disease-pair lists.

Two list-based checks. For an unordered pair list, the containment score
asks: of the listed pairs that touch the clusters' leading diseases at
all, how many land with both members inside one cluster's leading set?
For an ordered pair list, the alignment score asks the analogous question
along network edges: the first member among the source cluster's leaders
and the second among the target's. Significance comes from a permutation
null that shuffles disease identities under the fitted loadings.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from tcnmf.ascendancy import AscendancyNetwork
from tcnmf.errors import DataFormatError

UNORDERED_HEADER = ["code_a", "code_b"]
ORDERED_HEADER = ["cause", "effect"]


@dataclass(frozen=True)
class PairLookup:
    """Reference disease pairs; ordered pairs run cause to effect."""

    pairs: tuple
    ordered: bool
    n_dropped: int = 0

    def __len__(self) -> int:
        return len(self.pairs)


def make_lookup(pairs, ordered: bool, n_dropped: int = 0) -> PairLookup:
    canonical = set()
    for a, b in pairs:
        if a == b:
            raise DataFormatError(f"self-pair not allowed: {a!r}")
        canonical.add((a, b) if ordered else (min(a, b), max(a, b)))
    return PairLookup(pairs=tuple(sorted(canonical)), ordered=ordered, n_dropped=n_dropped)


def load_pair_lookup(path, codes) -> PairLookup:
    """Read a two-column CSV of disease pairs.

    Header ``code_a,code_b`` means unordered pairs, ``cause,effect``
    ordered ones. Pairs naming a code outside the vocabulary are dropped
    with one warning giving the count.
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"pair file not found: {path}")
    known = set(codes)
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header == UNORDERED_HEADER:
            ordered = False
        elif header == ORDERED_HEADER:
            ordered = True
        else:
            raise DataFormatError(
                f"pair file header must be {UNORDERED_HEADER} or {ORDERED_HEADER}, got {header}"
            )
        kept, dropped = [], 0
        for row in reader:
            if len(row) != 2:
                raise DataFormatError(f"malformed pair row: {row}")
            a, b = row[0].strip(), row[1].strip()
            if a in known and b in known:
                kept.append((a, b))
            else:
                dropped += 1
    if dropped:
        warnings.warn(f"dropped {dropped} pairs naming codes outside the vocabulary")
    return make_lookup(kept, ordered=ordered, n_dropped=dropped)


def leading_codes(clusters: np.ndarray, codes, l: int) -> tuple:
    """Per cluster, the ``l`` heaviest disease codes (ties by code order)."""
    if l < 1:
        raise ValueError(f"l must be >= 1, got {l}")
    codes = list(codes)
    if clusters.shape[1] != len(codes):
        raise ValueError(f"expected {clusters.shape[1]} codes, got {len(codes)}")
    result = []
    for row in clusters:
        order = sorted(range(len(codes)), key=lambda c: (-row[c], codes[c]))[:l]
        result.append(tuple(codes[c] for c in order))
    return tuple(result)


@dataclass(frozen=True)
class MetricResult:
    metric: str
    l: int
    score: float | None
    hits: int
    eligible: int


def containment_score(lookup: PairLookup, leaders: tuple, l: int) -> MetricResult:
    """Fraction of in-scope unordered pairs falling inside one cluster's leaders.

    A pair is in scope when either member appears in any cluster's
    leading set; it hits when both members sit in the same cluster's set.
    """
    if lookup.ordered:
        raise ValueError("containment needs an unordered pair list")
    leader_sets = [set(top) for top in leaders]
    union = set().union(*leader_sets) if leader_sets else set()
    eligible = [p for p in lookup.pairs if p[0] in union or p[1] in union]
    hits = sum(
        1
        for a, b in eligible
        if any(a in s and b in s for s in leader_sets)
    )
    score = hits / len(eligible) if eligible else None
    if score is None:
        warnings.warn("no reference pairs touch any cluster's leading diseases")
    return MetricResult(
        metric="containment", l=l, score=score, hits=hits, eligible=len(eligible)
    )


def alignment_score(
    lookup: PairLookup, leaders: tuple, network: AscendancyNetwork, l: int
) -> MetricResult:
    """Fraction of in-scope ordered pairs running along some network edge.

    Scope is restricted to clusters incident to at least one edge; a pair
    (cause, effect) hits when an edge carries the cause among its source's
    leaders and the effect among its target's. Undirected edges accept
    both orientations.
    """
    if not lookup.ordered:
        raise ValueError("alignment needs an ordered pair list")
    leader_sets = [set(top) for top in leaders]
    incident = set()
    arrows = []
    for e in network.edges:
        incident.update((e.source, e.target))
        arrows.append((e.source, e.target))
        if not e.directed:
            arrows.append((e.target, e.source))
    union = set().union(*(leader_sets[q] for q in incident)) if incident else set()
    eligible = [p for p in lookup.pairs if p[0] in union or p[1] in union]
    hits = sum(
        1
        for a, b in eligible
        if any(a in leader_sets[s] and b in leader_sets[t] for s, t in arrows)
    )
    score = hits / len(eligible) if eligible else None
    if score is None:
        warnings.warn("no reference pairs touch any connected cluster's leading diseases")
    return MetricResult(metric="alignment", l=l, score=score, hits=hits, eligible=len(eligible))


def score_lookup(
    clusters: np.ndarray,
    codes,
    lookup: PairLookup,
    l: int,
    network: AscendancyNetwork | None = None,
) -> MetricResult:
    leaders = leading_codes(clusters, codes, l)
    if lookup.ordered:
        if network is None:
            raise ValueError("ordered pair lists need a network to score against")
        return alignment_score(lookup, leaders, network, l)
    return containment_score(lookup, leaders, l)


def _null_score(clusters, codes, lookup, l, network, seed, draw) -> float:
    rng = np.random.default_rng([seed, draw])
    perm = rng.permutation(clusters.shape[1])
    result = score_lookup(clusters[:, perm], codes, lookup, l, network)
    # a draw with no in-scope pairs scores 0: it cannot beat the observed value
    return result.score if result.score is not None else 0.0


@dataclass(frozen=True)
class EvaluationResult:
    observed: MetricResult
    p_value: float | None
    n_perms: int
    seed: int
    null_mean: float

    def to_json_dict(self) -> dict:
        return {
            "L": self.observed.l,
            "metric": self.observed.metric,
            "score": self.observed.score,
            "a": self.observed.hits,
            "b": self.observed.eligible,
            "p_value": self.p_value,
            "n_perms": self.n_perms,
            "seed": self.seed,
        }


def evaluate(
    clusters: np.ndarray,
    codes,
    lookup: PairLookup,
    l: int,
    network: AscendancyNetwork | None = None,
    n_perms: int = 1000,
    seed: int = 0,
    n_jobs: int = 1,
) -> EvaluationResult:
    """Score a pair list and attach a permutation p-value.

    Each null draw applies one shared random relabeling of the disease
    axis to the loadings and rescores. Draw ``k`` uses its own generator
    derived from (seed, k), so results do not depend on execution order
    or parallelism. The p-value is (1 + #{null >= observed}) / (1 + n).
    """
    if n_perms < 1:
        raise ValueError(f"n_perms must be >= 1, got {n_perms}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        observed = score_lookup(clusters, codes, lookup, l, network)
    if observed.score is None:
        warnings.warn("observed score undefined; no p-value computed")
        return EvaluationResult(
            observed=observed, p_value=None, n_perms=n_perms, seed=seed, null_mean=np.nan
        )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if n_jobs == 1:
            nulls = [
                _null_score(clusters, codes, lookup, l, network, seed, k)
                for k in range(n_perms)
            ]
        else:
            nulls = Parallel(n_jobs=n_jobs)(
                delayed(_null_score)(clusters, codes, lookup, l, network, seed, k)
                for k in range(n_perms)
            )
    exceed = sum(1 for s in nulls if s >= observed.score)
    return EvaluationResult(
        observed=observed,
        p_value=(1 + exceed) / (1 + n_perms),
        n_perms=n_perms,
        seed=seed,
        null_mean=float(np.mean(nulls)),
    )


def write_evaluation_json(result: EvaluationResult, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(result.to_json_dict(), indent=2, sort_keys=True) + "\n")
    return path
