"""Non-negative factorisation of the stacked incidence matrix.

Minimizes the generalized KL divergence
    sum_uv [ d_uv * ln(d_uv / (AB)_uv) - d_uv + (AB)_uv ]
with the classic multiplicative updates, guarded against numerical
underflow: the model quotient is floored at ``epsilon`` inside every
update and both factors are floored at ``epsilon`` after every update.

Update numerators touch (AB) only at the nonzeros of D, so cost per
iteration is O(nnz * q) plus dense factor sums; the inner loop runs in the
compiled kernel backend when available (see ``tcnmf.kernels``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from joblib import Parallel, delayed

from tcnmf import kernels
from tcnmf.errors import DataFormatError, NumericalError
from tcnmf.matrix import ConcatenatedMatrix

STOP_WINDOW = 10  # iterations between stopping-rule comparisons


@dataclass(frozen=True)
class NmfConfig:
    q: int
    max_iters: int = 500
    tol: float = 1e-6
    epsilon: float = 1e-12
    seed: int = 0
    inner_updates: int = 1

    def __post_init__(self):
        if self.q < 1:
            raise ValueError(f"rank must be >= 1, got {self.q}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.tol < 0:
            raise ValueError(f"tol must be >= 0, got {self.tol}")
        if self.inner_updates < 1:
            raise ValueError(f"inner_updates must be >= 1, got {self.inner_updates}")


@dataclass(frozen=True)
class FactorModel:
    """Fitted factors: time courses (rows x q) and disease clusters (q x c)."""

    time_courses: np.ndarray
    clusters: np.ndarray
    q: int
    seed: int
    divergence_trace: np.ndarray
    t: int
    n: int

    @property
    def c(self) -> int:
        return self.clusters.shape[1]

    @property
    def n_iters(self) -> int:
        return len(self.divergence_trace) - 1

    @property
    def final_divergence(self) -> float:
        return float(self.divergence_trace[-1])

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        """Clusters rescaled so each row peaks at 1, time courses compensated.

        The product is unchanged; raw factors stay as fitted.
        """
        peaks = self.clusters.max(axis=1)
        peaks = np.where(peaks > 0, peaks, 1.0)
        return self.time_courses * peaks[None, :], self.clusters / peaks[:, None]


class _CsrView:
    """D as raw CSR arrays in the layout the kernels expect."""

    def __init__(self, data, indices, indptr, shape):
        self.data = data
        self.indices = indices
        self.indptr = indptr
        self.shape = shape
        self.total = float(data.sum())

    @classmethod
    def from_any(cls, d):
        if isinstance(d, ConcatenatedMatrix):
            d = d.values
        if sp.issparse(d):
            csr = d.tocsr().astype(np.float64)
            csr.eliminate_zeros()
        else:
            csr = sp.csr_matrix(np.asarray(d, dtype=np.float64))
        if csr.nnz and csr.data.min() < 0:
            raise ValueError("input matrix must be non-negative")
        if not np.all(np.isfinite(csr.data)):
            raise ValueError("input matrix must be finite")
        return cls(
            np.ascontiguousarray(csr.data, dtype=np.float64),
            np.ascontiguousarray(csr.indices, dtype=np.int64),
            np.ascontiguousarray(csr.indptr, dtype=np.int64),
            csr.shape,
        )


def _divergence(view: _CsrView, a, b, eps) -> float:
    nz = kernels.kl_nonzero_terms(view.data, view.indices, view.indptr, a, b, eps)
    return nz + float(a.sum(axis=0) @ b.sum(axis=1))


def _update(view: _CsrView, a, b, eps, inner: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """One multiplicative step: clusters first, then time courses.

    With inner > 1 each factor's update is applied that many times in a
    row (ratios recomputed each sweep) before switching to the other
    factor. Every sweep lowers the objective, so the per-step guarantees
    are unchanged; repetition just converges faster per step on hard
    problems because each block subproblem is solved more fully.
    """
    col_sums = np.maximum(a.sum(axis=0)[:, None], eps)
    for _ in range(inner):
        numer_b = kernels.right_numerator(view.data, view.indices, view.indptr, a, b, eps)
        b = b * numer_b / col_sums
        np.maximum(b, eps, out=b)
    row_sums = np.maximum(b.sum(axis=1)[None, :], eps)
    for _ in range(inner):
        numer_a = kernels.left_numerator(view.data, view.indices, view.indptr, a, b, eps)
        a = a * numer_a / row_sums
        np.maximum(a, eps, out=a)
    return a, b


def update_step(d, a, b, epsilon: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Public single update step on any non-negative matrix input.

    Returns new (time_courses, clusters); the cluster factor is updated
    first and its updated value feeds the time-course update.
    """
    view = _CsrView.from_any(d)
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return _update(view, a, b, epsilon)


def _initial_factors(view: _CsrView, config: NmfConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    # uniform on (0, 1], jointly rescaled so mean(AB) matches mean(D)
    n_rows, n_cols = view.shape
    a = 1.0 - rng.random((n_rows, config.q))
    b = 1.0 - rng.random((config.q, n_cols))
    mean_d = view.total / (n_rows * n_cols)
    mean_ab = float(a.sum(axis=0) @ b.sum(axis=1)) / (n_rows * n_cols)
    if mean_d > 0 and mean_ab > 0:
        scale = np.sqrt(mean_d / mean_ab)
        a *= scale
        b *= scale
    np.maximum(a, config.epsilon, out=a)
    np.maximum(b, config.epsilon, out=b)
    return a, b


def factorize(d, config: NmfConfig, t: int | None = None, n: int | None = None) -> FactorModel:
    """Fit D ~ A @ B by multiplicative KL updates.

    Stops when the relative objective change over a 10-iteration window
    drops below ``config.tol``, or at ``config.max_iters``. The returned
    divergence trace holds the objective at initialization and after every
    iteration and is non-increasing up to floating-point roundoff.
    """
    if isinstance(d, ConcatenatedMatrix):
        t, n = d.t, d.n
    view = _CsrView.from_any(d)
    n_rows, n_cols = view.shape
    if t is None or n is None:
        t, n = n_rows, 1
    if t * n != n_rows:
        raise ValueError(f"t*n = {t * n} does not match row count {n_rows}")
    if config.q > min(n_rows, n_cols):
        raise ValueError(
            f"rank {config.q} exceeds matrix dimensions {view.shape}"
        )
    rng = np.random.default_rng(config.seed)
    a, b = _initial_factors(view, config, rng)
    eps = config.epsilon
    trace = [_divergence(view, a, b, eps)]
    for iteration in range(1, config.max_iters + 1):
        a, b = _update(view, a, b, eps, config.inner_updates)
        obj = _divergence(view, a, b, eps)
        if not np.isfinite(obj):
            raise NumericalError(f"objective became non-finite at iteration {iteration}")
        trace.append(obj)
        if iteration >= STOP_WINDOW:
            previous = trace[-1 - STOP_WINDOW]
            if abs(previous - trace[-1]) < config.tol * max(abs(previous), 1e-300):
                break
    return FactorModel(
        time_courses=a,
        clusters=b,
        q=config.q,
        seed=config.seed,
        divergence_trace=np.asarray(trace),
        t=t,
        n=n,
    )


def multi_restart(d, config: NmfConfig, n_runs: int, n_jobs: int = 1) -> list[FactorModel]:
    """Independent factorisations with seeds seed, seed+1, ...

    Runs are order-deterministic regardless of parallelism. If any run
    fails, the failures are collected and re-raised together.
    """
    if n_runs < 1:
        raise ValueError(f"n_runs must be >= 1, got {n_runs}")
    configs = [replace(config, seed=config.seed + run) for run in range(n_runs)]

    def _one(cfg):
        try:
            return factorize(d, cfg), None
        except NumericalError as exc:
            return None, exc

    if n_jobs == 1:
        outcomes = [_one(cfg) for cfg in configs]
    else:
        outcomes = Parallel(n_jobs=n_jobs)(delayed(_one)(cfg) for cfg in configs)
    failures = [(i, exc) for i, (_, exc) in enumerate(outcomes) if exc is not None]
    if failures:
        details = "; ".join(f"run {i} (seed {configs[i].seed}): {exc}" for i, exc in failures)
        raise NumericalError(f"{len(failures)} of {n_runs} restarts failed: {details}")
    return [model for model, _ in outcomes]


def write_model(model: FactorModel, directory, codes=None) -> Path:
    """Serialize a model: JSON manifest + f64 little-endian blobs + TSV view.

    The blobs hold the raw factors row-major; the TSV shows the clusters
    with each row rescaled to peak 1 for human inspection.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "time_courses.bin").write_bytes(
        np.ascontiguousarray(model.time_courses, dtype="<f8").tobytes()
    )
    (directory / "clusters.bin").write_bytes(
        np.ascontiguousarray(model.clusters, dtype="<f8").tobytes()
    )
    manifest = {
        "q": model.q,
        "c": model.c,
        "t": model.t,
        "n": model.n,
        "seed": model.seed,
        "iterations": model.n_iters,
        "final_divergence": model.final_divergence,
        "divergence_trace": model.divergence_trace.tolist(),
    }
    (directory / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if codes is None:
        codes = [f"c{j}" for j in range(model.c)]
    _, clusters_norm = model.normalized()
    lines = ["cluster\t" + "\t".join(codes)]
    for qi in range(model.q):
        row = "\t".join(format(v, ".6g") for v in clusters_norm[qi])
        lines.append(f"{qi}\t{row}")
    (directory / "clusters.tsv").write_text("\n".join(lines) + "\n")
    return directory


def read_model(directory) -> FactorModel:
    directory = Path(directory)
    manifest_path = directory / "model.json"
    if not manifest_path.exists():
        raise DataFormatError(f"model manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    q, c, t, n = manifest["q"], manifest["c"], manifest["t"], manifest["n"]
    a = np.frombuffer((directory / "time_courses.bin").read_bytes(), dtype="<f8")
    b = np.frombuffer((directory / "clusters.bin").read_bytes(), dtype="<f8")
    if a.size != t * n * q or b.size != q * c:
        raise DataFormatError(f"factor blob sizes inconsistent with manifest in {directory}")
    return FactorModel(
        time_courses=a.reshape(t * n, q).copy(),
        clusters=b.reshape(q, c).copy(),
        q=q,
        seed=manifest["seed"],
        divergence_trace=np.asarray(manifest["divergence_trace"]),
        t=t,
        n=n,
    )
