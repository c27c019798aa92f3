"""Directed relationships between cluster time courses.

Each cluster's time course is binarized at a fraction of its peak, and
pairs of binary traces are compared through a 2x2 co-activation table.
From the table come two statistics: kappa, a chance-corrected measure of
co-activation strength (symmetric), and tau, a signed imbalance of the
two marginals (antisymmetric) whose sign points from the broader trace
to the narrower one. The strongest pairs by kappa form a network whose
edges are oriented by the sign of tau.
"""

from __future__ import annotations

import colorsys
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tcnmf.errors import DataFormatError, NumericalError
from tcnmf.nmf import FactorModel

THETA_TOL = 1e-6


@dataclass(frozen=True)
class BinaryTimeCourse:
    """Thresholded time courses, rows = t*n stacked ages, cols = clusters."""

    values: np.ndarray
    t: int
    n: int
    fraction: float
    scope: str

    def __post_init__(self):
        if self.values.shape[0] != self.t * self.n:
            raise ValueError(
                f"row count {self.values.shape[0]} does not match t*n = {self.t * self.n}"
            )

    @property
    def q(self) -> int:
        return self.values.shape[1]

    def patient_segment(self, p: int) -> np.ndarray:
        return self.values[p * self.t : (p + 1) * self.t]


def binarize_column(values, fraction: float = 0.75) -> np.ndarray:
    """One trace thresholded at ``fraction`` of its peak (1 at or above).

    An all-zero trace stays all zero and is flagged as degenerate.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    values = np.asarray(values, dtype=np.float64)
    peak = values.max(initial=0.0)
    if peak <= 0:
        warnings.warn("all-zero time course; binarized trace is all zero")
        return np.zeros(values.shape, dtype=np.uint8)
    return (values >= fraction * peak).astype(np.uint8)


def binarize(
    model: FactorModel, fraction: float = 0.75, scope: str = "global"
) -> BinaryTimeCourse:
    """Threshold each cluster's time course at ``fraction`` of its peak.

    ``scope="global"`` takes the peak over all patients' rows;
    ``scope="per_patient"`` takes it within each patient's block, so every
    patient expressing a cluster at all contributes active ages (silent
    blocks simply stay zero).
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if scope not in ("global", "per_patient"):
        raise ValueError(f"unknown scope {scope!r}")
    a = np.asarray(model.time_courses, dtype=np.float64)
    if scope == "global":
        active = np.column_stack([binarize_column(a[:, j], fraction) for j in range(model.q)])
    else:
        blocks = a.reshape(model.n, model.t, model.q)
        peaks = np.repeat(blocks.max(axis=1), model.t, axis=0)
        active = ((a >= fraction * peaks) & (peaks > 0)).astype(np.uint8)
    return BinaryTimeCourse(
        values=active,
        t=model.t,
        n=model.n,
        fraction=fraction,
        scope=scope,
    )


@dataclass(frozen=True)
class ThetaEstimate:
    """Joint activation probabilities for an ordered trace pair (v, w).

    theta1: both active; theta2: only v; theta3: only w; theta4: neither.
    ``counts`` carries the raw cell counts when estimated from traces.
    """

    theta1: float
    theta2: float
    theta3: float
    theta4: float
    counts: tuple | None = None

    def __post_init__(self):
        values = (self.theta1, self.theta2, self.theta3, self.theta4)
        if any(x < 0 or not np.isfinite(x) for x in values):
            raise ValueError(f"probabilities must be finite and non-negative: {values}")
        if abs(sum(values) - 1.0) > THETA_TOL:
            raise ValueError(f"probabilities must sum to 1, got {sum(values)}")

    def swapped(self) -> "ThetaEstimate":
        """The estimate for the pair in reverse order (w, v)."""
        counts = None
        if self.counts is not None:
            z1, z2, z3, z4 = self.counts
            counts = (z1, z3, z2, z4)
        return ThetaEstimate(self.theta1, self.theta3, self.theta2, self.theta4, counts)


def estimate_theta(v, w, alpha: float = 0.0) -> ThetaEstimate:
    """Tabulate the 2x2 co-activation frequencies of two binary traces.

    ``alpha`` adds a pseudo-count to every cell before normalizing.
    """
    v = np.asarray(v).astype(bool)
    w = np.asarray(w).astype(bool)
    if v.shape != w.shape or v.ndim != 1:
        raise ValueError(f"traces must be 1-d and equal length: {v.shape} vs {w.shape}")
    if v.size == 0:
        raise ValueError("traces must be non-empty")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    cell = (~v).astype(np.intp) * 2 + (~w).astype(np.intp)
    z = np.bincount(cell, minlength=4)
    smoothed = z.astype(np.float64) + alpha
    theta = smoothed / smoothed.sum()
    return ThetaEstimate(*theta, counts=tuple(int(x) for x in z))


@dataclass(frozen=True)
class PairStatistics:
    """Both statistics for one ordered trace pair, with intermediates."""

    kappa: float
    tau: float
    expected: float
    balance_weight: float


def _kappa_terms(theta: ThetaEstimate) -> tuple[float, float, float]:
    """(kappa, expected joint rate, balance weight) for one pair."""
    t1, t2, t3 = theta.theta1, theta.theta2, theta.theta3
    expected = (t1 + t2) * (t1 + t3)
    if t1 == expected:
        # independence; both weight branches evaluate to exactly 0.5
        return 0.0, expected, 0.5
    highest = min(t1 + t2, t1 + t3)
    lowest = max(0.0, 2 * t1 + t2 + t3 - 1.0)
    # the weight runs linearly from 0 at the attainable minimum through
    # 0.5 at independence to 1 at the attainable maximum, which is the
    # only blending that makes the ratio hit exactly -1 and 1 there
    if t1 >= expected:
        weight = (t1 - expected) / (2 * (highest - expected)) + 0.5
    else:
        weight = 0.5 + (t1 - expected) / (2 * (expected - lowest))
    denom = weight * (highest - expected) + (1 - weight) * (expected - lowest)
    if denom == 0:
        raise NumericalError(f"degenerate kappa denominator for {theta}")
    return (t1 - expected) / denom, expected, weight


def kappa(theta: ThetaEstimate) -> float:
    """Chance-corrected co-activation on [-1, 1]; 0 when independent.

    The observed both-active rate is compared to the rate expected from
    the marginals and rescaled by a weighted span to its attainable
    extreme, so that 1 means maximal co-activation given the marginals
    and -1 maximal avoidance.
    """
    return _kappa_terms(theta)[0]


def tau(theta: ThetaEstimate) -> float:
    """Signed marginal imbalance on [-1, 1]; positive when v is broader.

    Positive tau means the first trace is active in a superset sense
    (larger marginal), negative the reverse; swapping the traces flips
    the sign exactly.
    """
    t1, t2, t3 = theta.theta1, theta.theta2, theta.theta3
    if t1 + t2 == 0 and t1 + t3 == 0:
        raise NumericalError("tau undefined: both traces are never active")
    if t2 >= t3:
        return 1.0 - (t1 + t3) / (t1 + t2)
    return (t1 + t2) / (t1 + t3) - 1.0


def pair_statistics(theta: ThetaEstimate) -> PairStatistics:
    """Both pair statistics plus the intermediates used to form kappa."""
    k, expected, weight = _kappa_terms(theta)
    return PairStatistics(
        kappa=k, tau=tau(theta), expected=expected, balance_weight=weight
    )


@dataclass(frozen=True)
class PairwiseStatistics:
    """kappa (symmetric) and tau (antisymmetric) for every cluster pair.

    Entries are NaN for pairs with no valid observations.
    """

    kappa: np.ndarray
    tau: np.ndarray
    fraction: float
    scope: str
    aggregation: str

    @property
    def q(self) -> int:
        return self.kappa.shape[0]


def _pair_per_patient(binary: BinaryTimeCourse, i, j, alpha):
    blocks = binary.values.reshape(binary.n, binary.t, binary.q)
    v, w = blocks[:, :, i], blocks[:, :, j]
    valid = v.any(axis=1) & w.any(axis=1)
    kappas, taus = [], []
    for p in np.flatnonzero(valid):
        theta = estimate_theta(v[p], w[p], alpha=alpha)
        kappas.append(kappa(theta))
        taus.append(tau(theta))
    if not kappas:
        return np.nan, np.nan
    return float(np.mean(kappas)), float(np.mean(taus))


def _pair_pooled(binary: BinaryTimeCourse, i, j, alpha):
    v, w = binary.values[:, i], binary.values[:, j]
    if not v.any() or not w.any():
        return np.nan, np.nan
    theta = estimate_theta(v, w, alpha=alpha)
    return kappa(theta), tau(theta)


def pairwise_statistics(
    model: FactorModel,
    fraction: float = 0.75,
    scope: str = "global",
    aggregation: str = "per_patient",
    alpha: float = 0.0,
) -> PairwiseStatistics:
    """kappa and tau between every pair of binarized cluster traces.

    ``aggregation="per_patient"`` scores each patient's block separately,
    skips patients where either trace is silent, and averages; "pooled"
    scores the full stacked traces once. Pairs without any valid
    observation get NaN.
    """
    if aggregation not in ("per_patient", "pooled"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    binary = binarize(model, fraction=fraction, scope=scope)
    score_pair = _pair_per_patient if aggregation == "per_patient" else _pair_pooled
    q = binary.q
    kap = np.full((q, q), np.nan)
    tav = np.full((q, q), np.nan)
    missing = []
    for i in range(q):
        for j in range(i, q):
            k, t = score_pair(binary, i, j, alpha)
            kap[i, j] = kap[j, i] = k
            tav[i, j], tav[j, i] = t, -t if not np.isnan(t) else np.nan
            if i != j and np.isnan(k):
                missing.append((i, j))
    if missing:
        warnings.warn(f"cluster pairs with no valid observations: {missing}")
    return PairwiseStatistics(
        kappa=kap, tau=tav, fraction=fraction, scope=scope, aggregation=aggregation
    )


@dataclass(frozen=True)
class NetworkNode:
    cluster: int
    top_diseases: tuple  # of (code, weight), weight normalized to peak 1


@dataclass(frozen=True)
class NetworkEdge:
    source: int
    target: int
    kappa: float
    tau: float
    directed: bool


@dataclass(frozen=True)
class AscendancyNetwork:
    nodes: tuple
    edges: tuple
    kappa_threshold: float | None

    def to_json_dict(self) -> dict:
        return {
            "kappa_threshold": self.kappa_threshold,
            "nodes": [
                {
                    "id": node.cluster,
                    "top_diseases": [
                        {"code": code, "weight": weight} for code, weight in node.top_diseases
                    ],
                }
                for node in self.nodes
            ],
            "edges": [
                {
                    "from": e.source,
                    "to": e.target,
                    "kappa": e.kappa,
                    "tau": e.tau,
                    "directed": e.directed,
                }
                for e in self.edges
            ],
        }


def _top_diseases(row: np.ndarray, codes, count: int = 3):
    order = sorted(range(len(row)), key=lambda c: (-row[c], codes[c]))[:count]
    peak = row[order[0]] if row[order[0]] > 0 else 1.0
    return tuple((codes[c], float(row[c] / peak)) for c in order)


def build_network(
    stats: PairwiseStatistics,
    model: FactorModel,
    codes,
    top_k_edges: int = 60,
) -> AscendancyNetwork:
    """Keep the strongest pairs by kappa and orient each by the sign of tau.

    Pairs sort by descending kappa (ties by index); an edge runs from the
    broader trace to the narrower one, or stays undirected when tau is
    exactly zero. The threshold is the kappa of the last edge kept.
    """
    if top_k_edges < 0:
        raise ValueError(f"top_k_edges must be >= 0, got {top_k_edges}")
    if len(codes) != model.c:
        raise ValueError(f"expected {model.c} codes, got {len(codes)}")
    q = stats.q
    pairs = [
        (i, j)
        for i in range(q)
        for j in range(i + 1, q)
        if not np.isnan(stats.kappa[i, j])
    ]
    pairs.sort(key=lambda p: (-stats.kappa[p], p))
    if top_k_edges > len(pairs):
        warnings.warn(
            f"requested {top_k_edges} edges but only {len(pairs)} scored pairs exist",
            stacklevel=2,
        )
    selected = pairs[:top_k_edges]
    edges = []
    for i, j in selected:
        t = stats.tau[i, j]
        if t > 0:
            source, target = i, j
        elif t < 0:
            source, target = j, i
        else:
            source, target = i, j
        edges.append(
            NetworkEdge(
                source=source,
                target=target,
                kappa=float(stats.kappa[i, j]),
                tau=float(abs(t)) if t != 0 else 0.0,
                directed=bool(t != 0),
            )
        )
    nodes = tuple(
        NetworkNode(cluster=qi, top_diseases=_top_diseases(model.clusters[qi], list(codes)))
        for qi in range(q)
    )
    threshold = float(stats.kappa[selected[-1]]) if selected else None
    return AscendancyNetwork(nodes=nodes, edges=tuple(edges), kappa_threshold=threshold)


def write_network_json(network: AscendancyNetwork, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(network.to_json_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_network_json(path) -> AscendancyNetwork:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"network file not found: {path}")
    payload = json.loads(path.read_text())
    try:
        nodes = tuple(
            NetworkNode(
                cluster=node["id"],
                top_diseases=tuple((d["code"], d["weight"]) for d in node["top_diseases"]),
            )
            for node in payload["nodes"]
        )
        edges = tuple(
            NetworkEdge(
                source=e["from"],
                target=e["to"],
                kappa=e["kappa"],
                tau=e["tau"],
                directed=e["directed"],
            )
            for e in payload["edges"]
        )
        threshold = payload["kappa_threshold"]
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: malformed network file: {exc}") from None
    return AscendancyNetwork(nodes=nodes, edges=edges, kappa_threshold=threshold)


def _node_color(cluster: int, q: int) -> str:
    r, g, b = colorsys.hsv_to_rgb(cluster / max(q, 1), 0.6, 0.85)
    return f"#{round(r * 255):02x}{round(g * 255):02x}{round(b * 255):02x}"


def write_network_dot(network: AscendancyNetwork, path) -> Path:
    """Graphviz rendering; each edge takes its source node's color."""
    path = Path(path)
    q = len(network.nodes)
    lines = ["digraph clusters {", "  node [shape=box, style=rounded];"]
    for node in network.nodes:
        label = f"cluster {node.cluster}" + "".join(
            f"\\n{code} {weight:.2f}" for code, weight in node.top_diseases
        )
        lines.append(
            f'  n{node.cluster} [label="{label}", color="{_node_color(node.cluster, q)}"];'
        )
    for e in network.edges:
        attrs = [f'color="{_node_color(e.source, q)}"', f'label="k={e.kappa:.2f}"']
        if not e.directed:
            attrs.append("dir=none")
        lines.append(f"  n{e.source} -> n{e.target} [{', '.join(attrs)}];")
    lines.append("}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_matrix_tsv(matrix: np.ndarray, path) -> Path:
    """Square cluster-by-cluster table with header row/column of indices."""
    path = Path(path)
    q = matrix.shape[0]
    lines = ["cluster\t" + "\t".join(str(j) for j in range(q))]
    for i in range(q):
        cells = "\t".join("nan" if np.isnan(v) else format(v, ".10g") for v in matrix[i])
        lines.append(f"{i}\t{cells}")
    path.write_text("\n".join(lines) + "\n")
    return path
