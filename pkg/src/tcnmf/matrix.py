"""Per-patient incidence matrices and assembly of the factorisation input.

Pipeline order is fixed: build -> inverse-patient-frequency weighting ->
Gaussian smoothing along age -> vertical concatenation across patients.
Rows are ages 0..T-1, columns are vocabulary positions. Matrices stay sparse
throughout; smoothing scatters each event into a kernel-radius bump, so
memory stays linear in event count.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from tcnmf.errors import DataFormatError
from tcnmf.ingest import DiseaseVocabulary

TRIPLET_DTYPE = np.dtype([("row", "<u8"), ("col", "<u4"), ("value", "<f8")])


@dataclass(frozen=True)
class PatientMatrix:
    """T x C non-negative matrix for one patient (CSR)."""

    patient_id: str
    values: sp.csr_matrix

    @property
    def t(self) -> int:
        return self.values.shape[0]

    @property
    def c(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class IpfWeights:
    """Per-disease ln(N / N_i) weights.

    Diseases absent from every patient get weight 0 (with a warning) instead
    of an infinite up-weight.
    """

    weights: np.ndarray
    n_patients: int
    patient_counts: np.ndarray


@dataclass(frozen=True)
class SmoothingKernel:
    """Truncated, normalized Gaussian taps for smoothing along the age axis."""

    sigma: float
    radius: int
    taps: np.ndarray

    def __post_init__(self):
        if self.taps.shape != (2 * self.radius + 1,):
            raise ValueError("taps length must be 2*radius + 1")
        if abs(float(self.taps.sum()) - 1.0) > 1e-12:
            raise ValueError("kernel taps must sum to 1")
        if np.any(self.taps < 0):
            raise ValueError("kernel taps must be non-negative")


def gaussian_kernel(sigma: float) -> SmoothingKernel:
    """Gaussian taps truncated at radius ceil(4*sigma), normalized to sum 1.

    sigma = 0 yields the identity kernel (no smoothing).
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return SmoothingKernel(0.0, 0, np.array([1.0]))
    radius = math.ceil(4.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=float)
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    taps /= taps.sum()
    return SmoothingKernel(float(sigma), radius, taps)


@dataclass(frozen=True)
class ConcatenatedMatrix:
    """(T*N) x C stack of per-patient matrices; row block p is patient p."""

    values: sp.csr_matrix
    t: int
    n: int
    c: int
    patient_index: tuple[str, ...]

    def __post_init__(self):
        if self.values.shape != (self.t * self.n, self.c):
            raise ValueError("values shape inconsistent with T, N, C")
        if len(self.patient_index) != self.n:
            raise ValueError("patient_index length must equal N")


def build_patient_matrix(events, vocabulary: DiseaseVocabulary, t_max: int) -> PatientMatrix:
    """Binary first-incidence matrix: entry (age, code column) = 1 per event.

    Events must belong to one patient and already be first-incidence filtered
    (at most one event per code).
    """
    patient_ids = {e.patient_id for e in events}
    if len(patient_ids) > 1:
        raise ValueError(f"events span multiple patients: {sorted(patient_ids)}")
    patient_id = next(iter(patient_ids)) if patient_ids else ""
    codes = [e.code for e in events]
    if len(codes) != len(set(codes)):
        raise ValueError(f"patient {patient_id}: repeated code, events are not first-incidence")
    rows, cols = [], []
    for e in events:
        if e.age_years >= t_max or e.age_years < 0:
            raise ValueError(f"patient {patient_id}: event age {e.age_years} outside [0, {t_max})")
        rows.append(e.age_years)
        cols.append(vocabulary.index[e.code])
    values = sp.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(t_max, len(vocabulary)), dtype=np.float64
    )
    return PatientMatrix(patient_id, values)


def compute_ipf(matrices) -> IpfWeights:
    """ln(N / N_i) per disease, N_i = number of patients with the disease."""
    matrices = list(matrices)
    if not matrices:
        raise ValueError("need at least one patient matrix")
    c = matrices[0].c
    counts = np.zeros(c, dtype=np.int64)
    for m in matrices:
        counts += m.values.getnnz(axis=0) > 0
    n = len(matrices)
    weights = np.zeros(c)
    present = counts > 0
    weights[present] = np.log(n / counts[present])
    if not present.all():
        warnings.warn(
            f"{int((~present).sum())} disease(s) occur in no patient; their IPF weight is 0",
            stacklevel=2,
        )
    return IpfWeights(weights, n, counts)


def apply_ipf(matrix: PatientMatrix, weights: IpfWeights) -> PatientMatrix:
    """Scale column i by weights[i]."""
    if len(weights.weights) != matrix.c:
        raise ValueError(f"weight length {len(weights.weights)} != columns {matrix.c}")
    scaled = matrix.values @ sp.diags(weights.weights)
    return PatientMatrix(matrix.patient_id, scaled.tocsr())


def smooth_columns(matrix: PatientMatrix, kernel: SmoothingKernel,
                   boundary: str = "zero") -> PatientMatrix:
    """Convolve each column along the age axis with the kernel taps.

    boundary = "zero": ages outside [0, T) contribute nothing, so mass leaks
    at the edges (the conservative default). boundary = "renormalize": each
    output row is rescaled by the in-range tap mass instead.
    """
    if boundary not in ("zero", "renormalize"):
        raise ValueError(f"boundary must be 'zero' or 'renormalize', got {boundary!r}")
    if kernel.radius == 0:
        return matrix
    t = matrix.t
    coo = matrix.values.tocoo()
    offsets = np.arange(-kernel.radius, kernel.radius + 1)
    rows = (coo.row[:, None] + offsets[None, :]).ravel()
    cols = np.repeat(coo.col, len(offsets))
    vals = (coo.data[:, None] * kernel.taps[None, :]).ravel()
    keep = (rows >= 0) & (rows < t)
    out = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=matrix.values.shape)
    out = out.tocsr()
    out.sum_duplicates()
    if boundary == "renormalize":
        out = sp.diags(1.0 / _in_range_mass(kernel, t)) @ out
    return PatientMatrix(matrix.patient_id, out.tocsr())


def _in_range_mass(kernel: SmoothingKernel, t: int) -> np.ndarray:
    """Tap mass landing inside [0, t) for each output row."""
    sums = np.concatenate([[0.0], np.cumsum(kernel.taps)])
    rows = np.arange(t)
    lo = np.maximum(-kernel.radius, rows - t + 1) + kernel.radius
    hi = np.minimum(kernel.radius, rows) + kernel.radius
    return sums[hi + 1] - sums[lo]


def concatenate(matrices) -> ConcatenatedMatrix:
    """Stack patient matrices vertically; row block p belongs to patient p."""
    matrices = list(matrices)
    if not matrices:
        raise ValueError("need at least one patient matrix")
    t, c = matrices[0].t, matrices[0].c
    for m in matrices:
        if (m.t, m.c) != (t, c):
            raise ValueError(
                f"patient {m.patient_id}: shape {(m.t, m.c)} != expected {(t, c)}"
            )
    stacked = sp.vstack([m.values for m in matrices], format="csr")
    return ConcatenatedMatrix(
        values=stacked,
        t=t,
        n=len(matrices),
        c=c,
        patient_index=tuple(m.patient_id for m in matrices),
    )


def assemble(per_patient_events: dict[str, list], vocabulary: DiseaseVocabulary,
             t_max: int, kernel: SmoothingKernel,
             boundary: str = "zero") -> tuple[ConcatenatedMatrix, IpfWeights]:
    """Full build -> IPF -> smooth -> concatenate pass over a cohort.

    per_patient_events maps patient_id to that patient's event list; patients
    are stacked in sorted patient_id order for determinism.
    """
    order = sorted(per_patient_events)
    raw = [build_patient_matrix(per_patient_events[pid], vocabulary, t_max) for pid in order]
    ipf = compute_ipf(raw)
    processed = [
        smooth_columns(apply_ipf(m, ipf), kernel, boundary=boundary) for m in raw
    ]
    return concatenate(processed), ipf


def group_events_by_patient(events) -> dict[str, list]:
    grouped: dict[str, list] = {}
    for e in events:
        grouped.setdefault(e.patient_id, []).append(e)
    return grouped


def write_concatenated(matrix: ConcatenatedMatrix, base_path,
                       provenance: dict | None = None) -> tuple[Path, Path]:
    """Write <base>.bin (little-endian row:u64, col:u32, value:f64 triplets)
    plus a <base>.json sidecar with shape, patient index and provenance."""
    base = Path(base_path)
    coo = matrix.values.tocoo()
    order = np.lexsort((coo.col, coo.row))
    triplets = np.empty(coo.nnz, dtype=TRIPLET_DTYPE)
    triplets["row"] = coo.row[order]
    triplets["col"] = coo.col[order]
    triplets["value"] = coo.data[order]
    bin_path = base.with_suffix(".bin")
    json_path = base.with_suffix(".json")
    bin_path.write_bytes(triplets.tobytes())
    sidecar = {
        "t": matrix.t,
        "n": matrix.n,
        "c": matrix.c,
        "nnz": int(coo.nnz),
        "patient_index": list(matrix.patient_index),
        "provenance": provenance or {},
    }
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return bin_path, json_path


def read_concatenated(base_path) -> tuple[ConcatenatedMatrix, dict]:
    base = Path(base_path)
    bin_path = base.with_suffix(".bin")
    json_path = base.with_suffix(".json")
    if not bin_path.exists() or not json_path.exists():
        raise DataFormatError(f"matrix artifact not found at {base}.bin/.json")
    sidecar = json.loads(json_path.read_text())
    raw = bin_path.read_bytes()
    if len(raw) % TRIPLET_DTYPE.itemsize:
        raise DataFormatError(f"{bin_path}: size is not a multiple of the triplet record")
    triplets = np.frombuffer(raw, dtype=TRIPLET_DTYPE)
    if len(triplets) != sidecar["nnz"]:
        raise DataFormatError(f"{bin_path}: triplet count does not match sidecar nnz")
    shape = (sidecar["t"] * sidecar["n"], sidecar["c"])
    values = sp.csr_matrix(
        (triplets["value"], (triplets["row"], triplets["col"])), shape=shape
    )
    matrix = ConcatenatedMatrix(
        values=values,
        t=sidecar["t"],
        n=sidecar["n"],
        c=sidecar["c"],
        patient_index=tuple(sidecar["patient_index"]),
    )
    return matrix, sidecar.get("provenance", {})
