"""Synthetic cohorts with planted cluster structure.

A planted model fixes per-cluster disease loadings and age templates.
Each simulated patient expresses every cluster at a random strength; the
product of strength, template, and loading gives a per-(age, disease)
first-diagnosis hazard, plus a uniform background rate. Sampling keeps
the first success per disease, matching the first-incidence convention
of real event records. Generation is deterministic given the seed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from tcnmf.ingest import DiseaseVocabulary, EventRecord, PatientMeta

SCALE_SIGMA = 0.5  # lognormal spread of per-patient cluster strengths


@dataclass(frozen=True)
class PlantedModel:
    """Ground-truth factors: loadings (q x c) and age templates (q x t)."""

    loadings: np.ndarray
    templates: np.ndarray
    noise_rate: float = 0.0

    def __post_init__(self):
        if self.loadings.ndim != 2 or self.templates.ndim != 2:
            raise ValueError("loadings and templates must be 2-d")
        if self.loadings.shape[0] != self.templates.shape[0]:
            raise ValueError(
                f"cluster counts differ: {self.loadings.shape[0]} loadings rows"
                f" vs {self.templates.shape[0]} template rows"
            )
        if self.loadings.min() < 0 or self.templates.min() < 0:
            raise ValueError("loadings and templates must be non-negative")
        if not 0 <= self.noise_rate < 1:
            raise ValueError(f"noise_rate must be in [0, 1), got {self.noise_rate}")
        dominant = np.argmax(self.loadings, axis=1)
        if len(set(dominant.tolist())) != len(dominant):
            raise ValueError("each cluster must have a distinct dominant disease")

    @property
    def q(self) -> int:
        return self.loadings.shape[0]

    @property
    def c(self) -> int:
        return self.loadings.shape[1]

    @property
    def t(self) -> int:
        return self.templates.shape[1]


def default_codes(c: int) -> list[str]:
    width = max(2, len(str(c - 1)))
    return [f"d{j:0{width}d}" for j in range(c)]


def _bump(t: int, start: int, stop: int, peak: float) -> np.ndarray:
    """Gaussian bump centered in [start, stop), zero outside it."""
    ages = np.arange(t, dtype=np.float64)
    center = (start + stop - 1) / 2.0
    sigma = max((stop - start) / 4.0, 0.5)
    values = peak * np.exp(-0.5 * ((ages - center) / sigma) ** 2)
    values[(ages < start) | (ages >= stop)] = 0.0
    return values


def make_disjoint_model(
    q: int,
    c: int,
    t: int,
    noise_rate: float = 0.0,
    peak_rate: float = 0.15,
    margin: int = 2,
) -> PlantedModel:
    """Clusters with disjoint disease supports and disjoint age windows.

    Diseases split into q equal blocks with within-block weights falling
    from 1; ages after an initial margin split into q equal windows, each
    carrying one Gaussian bump. Every cluster is therefore identifiable
    from either axis.
    """
    if q < 2:
        raise ValueError(f"need at least 2 clusters, got {q}")
    if c < q or (t - margin) < 2 * q:
        raise ValueError(f"dimensions too small for {q} clusters: c={c}, t={t}")
    per = c // q
    loadings = np.zeros((q, c))
    for qi in range(q):
        block = np.arange(qi * per, (qi + 1) * per)
        loadings[qi, block] = np.linspace(1.0, 0.4, per)
    window = (t - margin) / q
    templates = np.zeros((q, t))
    for qi in range(q):
        start = margin + int(round(qi * window))
        stop = margin + int(round((qi + 1) * window))
        templates[qi] = _bump(t, start, stop, peak_rate)
    return PlantedModel(loadings=loadings, templates=templates, noise_rate=noise_rate)


def hazard(model: PlantedModel, strengths: np.ndarray) -> np.ndarray:
    """Per-(age, disease) first-diagnosis probability for one patient."""
    rates = (strengths[:, None] * model.templates).T @ model.loadings
    return np.clip(rates + model.noise_rate, 0.0, 1.0)


def generate_cohort(
    model: PlantedModel,
    n_patients: int,
    seed: int = 0,
    strata: str = "all",
) -> tuple[list[EventRecord], list[PatientMeta], DiseaseVocabulary]:
    """Sample first-incidence events for ``n_patients`` patients.

    Patient p draws cluster strengths lognormal(0, 0.5), then one uniform
    per (age, disease); the first age where the uniform falls below the
    hazard becomes that disease's event. Registration is age 0 and
    follow-up spans the full template length.
    """
    if n_patients < 0:
        raise ValueError(f"n_patients must be >= 0, got {n_patients}")
    rng = np.random.default_rng(seed)
    codes = default_codes(model.c)
    vocabulary = DiseaseVocabulary(codes)
    id_width = max(5, len(str(max(n_patients - 1, 0))))
    events: list[EventRecord] = []
    metas: list[PatientMeta] = []
    for p in range(n_patients):
        patient_id = f"p{p:0{id_width}d}"
        strengths = rng.lognormal(mean=0.0, sigma=SCALE_SIGMA, size=model.q)
        rates = hazard(model, strengths)
        hits = rng.random((model.t, model.c)) < rates
        has_event = hits.any(axis=0)
        first_age = hits.argmax(axis=0)
        for col in np.flatnonzero(has_event):
            events.append(
                EventRecord(
                    patient_id=patient_id,
                    code=codes[col],
                    age_years=int(first_age[col]),
                    strata=strata,
                )
            )
        metas.append(
            PatientMeta(
                patient_id=patient_id,
                registration_age_years=0,
                followup_years=model.t,
                strata=strata,
            )
        )
    if not events:
        warnings.warn("generated cohort has no events", stacklevel=2)
    return events, metas, vocabulary


def write_cohort(
    directory,
    model: PlantedModel,
    events,
    metas,
    vocabulary: DiseaseVocabulary,
    seed: int,
) -> Path:
    """Write events.csv, metadata.csv, vocabulary.txt, ground_truth.json."""
    from tcnmf.ingest import write_events_csv, write_metadata_csv

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_events_csv(events, directory / "events.csv")
    write_metadata_csv(metas, directory / "metadata.csv")
    vocabulary.to_file(directory / "vocabulary.txt")
    truth = {
        "loadings": model.loadings.tolist(),
        "templates": model.templates.tolist(),
        "noise_rate": model.noise_rate,
        "seed": seed,
        "n_patients": len(metas),
        "codes": list(vocabulary.codes),
    }
    (directory / "ground_truth.json").write_text(
        json.dumps(truth, indent=2, sort_keys=True) + "\n"
    )
    return directory


@dataclass(frozen=True)
class ClusterMatch:
    """Optimal pairing of estimated to reference clusters by cosine."""

    pairs: tuple  # of (estimated_index, reference_index)
    cosines: tuple

    @property
    def mean_cosine(self) -> float:
        return float(np.mean(self.cosines))


def _cosine_matrix(estimated: np.ndarray, reference: np.ndarray) -> np.ndarray:
    def unit(rows):
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        return np.divide(rows, norms, out=np.zeros_like(rows, dtype=float), where=norms > 0)

    return unit(np.asarray(estimated, float)) @ unit(np.asarray(reference, float)).T


def match_clusters(estimated: np.ndarray, reference: np.ndarray) -> ClusterMatch:
    """Pair up rows of two loading matrices to maximize total cosine."""
    estimated = np.atleast_2d(estimated)
    reference = np.atleast_2d(reference)
    if estimated.shape[1] != reference.shape[1]:
        raise ValueError(
            f"disease counts differ: {estimated.shape[1]} vs {reference.shape[1]}"
        )
    sim = _cosine_matrix(estimated, reference)
    rows, cols = linear_sum_assignment(sim, maximize=True)
    pairs = tuple(sorted(zip(rows.tolist(), cols.tolist())))
    return ClusterMatch(
        pairs=pairs, cosines=tuple(float(sim[r, c]) for r, c in pairs)
    )
