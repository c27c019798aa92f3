"""End-to-end orchestration: cohort files in, artifact directory out.

Each stage reads the previous stage's artifacts from fixed locations
under the output directory, so stages can also be rerun individually:

    ingest/       events.csv metadata.csv vocabulary.txt summary.json
    matrix/       matrix.bin matrix.json weights.json
    rank_scan/    scores.tsv                   (when a rank list is set)
    model/        model.json *.bin clusters.tsv  (when a single rank is set)
    ascendancy/   kappa.tsv tau.tsv network.json network.dot
    evaluation/   <metric>_l<L>.json
    manifest.json

Outputs carry no timestamps and every random draw comes from a recorded
seed, so rerunning a config reproduces every artifact bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

import tcnmf
from tcnmf import ascendancy as asc
from tcnmf import evaluation as ev
from tcnmf import ingest, matrix, rank_selection, synth
from tcnmf.config import PipelineConfig, config_to_dict, validate_config
from tcnmf.errors import ConfigError, DataFormatError
from tcnmf.nmf import NmfConfig, multi_restart, read_model, write_model

log = logging.getLogger("tcnmf.pipeline")


def fit_seed(seed: int, sigma: float, q: int) -> int:
    """Factorization seed for one (smoothing, rank) cell.

    Shared by single runs and grid cells so a 1x1 grid reproduces a
    direct run exactly.
    """
    sequence = np.random.SeedSequence((seed, round(sigma * 1e6), q))
    return int(sequence.generate_state(1)[0])


def _require(config: PipelineConfig, *names: str) -> None:
    missing = [n for n in names if getattr(config, n) is None]
    if missing:
        raise ConfigError(f"config is missing required paths: {', '.join(missing)}")


def _relative(paths, outdir: Path) -> list[str]:
    return sorted(p.relative_to(outdir).as_posix() for p in paths)


def stage_ingest(config: PipelineConfig, outdir: Path, stratum: str | None = None) -> list[Path]:
    """Load, filter, and rewrite the cohort under ingest/."""
    _require(config, "events", "metadata", "vocabulary")
    vocabulary = ingest.DiseaseVocabulary.from_file(config.vocabulary)
    events, event_rejects = ingest.load_events(config.events, vocabulary, t_max=config.t_max)
    meta, meta_rejects = ingest.load_metadata(config.metadata)
    if stratum is not None:
        events = [e for e in events if e.strata == stratum]
        meta = [m for m in meta if m.strata == stratum]
        if not meta:
            raise DataFormatError(f"no patients in stratum {stratum!r}")
    kept, inclusion = ingest.apply_inclusion(
        events,
        meta,
        min_followup=config.min_followup,
        washout=config.washout,
        washout_mode=config.washout_mode,
    )
    eligible = [m for m in meta if m.followup_years >= config.min_followup]
    stage_dir = outdir / "ingest"
    stage_dir.mkdir(parents=True, exist_ok=True)
    ingest.write_events_csv(kept, stage_dir / "events.csv")
    ingest.write_metadata_csv(eligible, stage_dir / "metadata.csv")
    vocabulary.to_file(stage_dir / "vocabulary.txt")
    summary = {
        "stratum": stratum,
        "event_rejections": json.loads(event_rejects.to_json()),
        "metadata_rejections": json.loads(meta_rejects.to_json()),
        "inclusion": dataclasses.asdict(inclusion),
    }
    (stage_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("ingest: kept %d events from %d patients", len(kept), len(eligible))
    return [stage_dir / n for n in ("events.csv", "metadata.csv", "vocabulary.txt", "summary.json")]


def _read_cohort(outdir: Path):
    stage_dir = outdir / "ingest"
    vocabulary = ingest.DiseaseVocabulary.from_file(stage_dir / "vocabulary.txt")
    events, _ = ingest.load_events(stage_dir / "events.csv", vocabulary)
    meta, _ = ingest.load_metadata(stage_dir / "metadata.csv")
    return vocabulary, events, meta


def _assemble(config: PipelineConfig, vocabulary, events, meta, sigma: float):
    per_patient = {m.patient_id: [] for m in meta}
    for e in events:
        if e.patient_id not in per_patient:
            raise DataFormatError(f"event for patient {e.patient_id!r} missing from metadata")
        per_patient[e.patient_id].append(e)
    kernel = matrix.gaussian_kernel(sigma)
    return matrix.assemble(
        per_patient, vocabulary, config.t_max, kernel, boundary=config.boundary
    )


def stage_matrix(config: PipelineConfig, outdir: Path) -> list[Path]:
    """Weight, smooth, and stack the cohort's matrices under matrix/."""
    vocabulary, events, meta = _read_cohort(outdir)
    stacked, weights = _assemble(config, vocabulary, events, meta, config.sigma)
    stage_dir = outdir / "matrix"
    stage_dir.mkdir(parents=True, exist_ok=True)
    provenance = {
        "sigma": config.sigma,
        "boundary": config.boundary,
        "t_max": config.t_max,
        "min_followup": config.min_followup,
        "washout": config.washout,
        "washout_mode": config.washout_mode,
    }
    bin_path, json_path = matrix.write_concatenated(stacked, stage_dir / "matrix", provenance)
    weights_payload = {
        "n_patients": weights.n_patients,
        "weights": {
            code: weights.weights[j] for j, code in enumerate(vocabulary.codes)
        },
    }
    weights_path = stage_dir / "weights.json"
    weights_path.write_text(json.dumps(weights_payload, indent=2, sort_keys=True) + "\n")
    log.info(
        "matrix: %d x %d, %d stored values", stacked.t * stacked.n, stacked.c, stacked.values.nnz
    )
    return [bin_path, json_path, weights_path]


def _nmf_config(config: PipelineConfig, q: int, seed: int) -> NmfConfig:
    return NmfConfig(
        q=q,
        max_iters=config.max_iters,
        tol=config.tol,
        epsilon=config.epsilon,
        seed=seed,
        inner_updates=config.inner_updates,
    )


def _fit_best(stacked, config: PipelineConfig, q: int, seed: int, n_jobs: int):
    models = multi_restart(stacked, _nmf_config(config, q, seed), config.n_runs, n_jobs=n_jobs)
    return min(models, key=lambda m: (m.final_divergence, m.seed))


def stage_factorize(config: PipelineConfig, outdir: Path, n_jobs: int = 1) -> list[Path]:
    """Fit the configured rank from several restarts; keep the best fit."""
    if config.q is None:
        raise ConfigError("factorize needs q")
    stacked, _ = matrix.read_concatenated(outdir / "matrix" / "matrix")
    vocabulary = ingest.DiseaseVocabulary.from_file(outdir / "ingest" / "vocabulary.txt")
    seed = fit_seed(config.seed, config.sigma, config.q)
    best = _fit_best(stacked, config, config.q, seed, n_jobs)
    model_dir = write_model(best, outdir / "model", codes=vocabulary.codes)
    log.info(
        "factorize: q=%d best of %d runs, divergence %.6g (seed %d)",
        config.q, config.n_runs, best.final_divergence, best.seed,
    )
    return [model_dir / n for n in ("model.json", "time_courses.bin", "clusters.bin", "clusters.tsv")]


def stage_rank_scan(config: PipelineConfig, outdir: Path, n_jobs: int = 1) -> list[Path]:
    """Score every candidate rank by consensus stability."""
    if not config.q_list:
        raise ConfigError("rank scan needs q_list")
    stacked, _ = matrix.read_concatenated(outdir / "matrix" / "matrix")
    base = _nmf_config(config, q=max(config.q_list), seed=config.seed)
    scores = rank_selection.rank_scan(
        stacked, config.q_list, base, n_restarts=config.n_restarts, n_jobs=n_jobs
    )
    stage_dir = outdir / "rank_scan"
    stage_dir.mkdir(parents=True, exist_ok=True)
    path = rank_selection.write_rank_scores(scores, stage_dir / "scores.tsv")
    log.info("rank scan: best q = %d", rank_selection.best_rank(scores))
    return [path]


def stage_ascendancy(config: PipelineConfig, outdir: Path) -> dict[str, list[Path]]:
    """Pairwise cluster statistics and the directed network."""
    model = read_model(outdir / "model")
    vocabulary = ingest.DiseaseVocabulary.from_file(outdir / "ingest" / "vocabulary.txt")
    stats = asc.pairwise_statistics(
        model,
        fraction=config.fraction,
        scope=config.scope,
        aggregation=config.aggregation,
        alpha=config.alpha,
    )
    stage_dir = outdir / "ascendancy"
    stage_dir.mkdir(parents=True, exist_ok=True)
    kappa_path = asc.write_matrix_tsv(stats.kappa, stage_dir / "kappa.tsv")
    tau_path = asc.write_matrix_tsv(stats.tau, stage_dir / "tau.tsv")
    network = asc.build_network(stats, model, vocabulary.codes, top_k_edges=config.top_k_edges)
    json_path = asc.write_network_json(network, stage_dir / "network.json")
    dot_path = asc.write_network_dot(network, stage_dir / "network.dot")
    log.info(
        "ascendancy: %d edges, threshold %s", len(network.edges), network.kappa_threshold
    )
    return {
        "kappa": [kappa_path],
        "tau": [tau_path],
        "network": [json_path, dot_path],
    }


def _configured_lookups(config: PipelineConfig, codes) -> list[ev.PairLookup]:
    lookups = []
    for name, want_ordered in (("comorbid_pairs", False), ("causal_pairs", True)):
        path = getattr(config, name)
        if path is None:
            continue
        lookup = ev.load_pair_lookup(path, codes)
        if lookup.ordered != want_ordered:
            kind = "ordered" if want_ordered else "unordered"
            raise ConfigError(f"{name} must hold {kind} pairs, got header for the other kind")
        lookups.append(lookup)
    return lookups


def stage_evaluate(config: PipelineConfig, outdir: Path, n_jobs: int = 1) -> list[Path]:
    """Score configured pair lists at every configured list length."""
    model = read_model(outdir / "model")
    vocabulary = ingest.DiseaseVocabulary.from_file(outdir / "ingest" / "vocabulary.txt")
    lookups = _configured_lookups(config, vocabulary.codes)
    if not lookups:
        raise ConfigError("evaluate needs comorbid_pairs and/or causal_pairs")
    network = None
    if any(lookup.ordered for lookup in lookups):
        network = asc.read_network_json(outdir / "ascendancy" / "network.json")
    stage_dir = outdir / "evaluation"
    stage_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for lookup in lookups:
        for l in config.l_list:
            result = ev.evaluate(
                model.clusters,
                vocabulary.codes,
                lookup,
                l,
                network=network if lookup.ordered else None,
                n_perms=config.n_perms,
                seed=config.eval_seed,
                n_jobs=n_jobs,
            )
            path = stage_dir / f"{result.observed.metric}_l{l}.json"
            ev.write_evaluation_json(result, path)
            log.info(
                "evaluate: %s at l=%d score=%s p=%s",
                result.observed.metric, l, result.observed.score, result.p_value,
            )
            written.append(path)
    return written


def _write_manifest(outdir: Path, payload: dict) -> Path:
    path = outdir / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _manifest_skeleton(config: PipelineConfig, stratum: str | None) -> dict:
    settings = config_to_dict(config)
    del settings["paths"]["output_dir"]  # keep artifacts location-independent
    return {
        "version": tcnmf.__version__,
        "stratum": stratum,
        "settings": settings,
        "stages": {},
    }


def _run_single(config: PipelineConfig, outdir: Path, stratum: str | None, n_jobs: int) -> Path:
    if (config.q is None) == (not config.q_list):
        raise ConfigError("set exactly one of q (full run) or q_list (rank scan run)")
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = _manifest_skeleton(config, stratum)
    manifest["seeds"] = {"base": config.seed, "evaluation": config.eval_seed}
    if config.q is not None:
        manifest["seeds"]["fit"] = fit_seed(config.seed, config.sigma, config.q)

    def record(name: str, paths) -> None:
        manifest["stages"][name] = _relative(paths, outdir)

    skipped = []
    plan: list[tuple[str, object]] = [
        ("ingest", lambda: record("ingest", stage_ingest(config, outdir, stratum))),
        ("matrix", lambda: record("matrix", stage_matrix(config, outdir))),
    ]
    if config.q_list:
        plan.append(("rank_scan", lambda: record("rank_scan", stage_rank_scan(config, outdir, n_jobs))))
    else:
        def _asc():
            for name, paths in stage_ascendancy(config, outdir).items():
                record(name, paths)

        plan.append(("model", lambda: record("model", stage_factorize(config, outdir, n_jobs))))
        plan.append(("ascendancy", _asc))
        if config.comorbid_pairs or config.causal_pairs:
            plan.append(("evaluation", lambda: record("evaluation", stage_evaluate(config, outdir, n_jobs))))
        else:
            skipped.append("evaluation")
    if skipped:
        manifest["skipped_stages"] = skipped
    for name, step in plan:
        try:
            step()
        except Exception as exc:
            manifest["failed_stage"] = name
            _write_manifest(outdir, manifest)
            raise type(exc)(f"stage {name}: {exc}") from exc
    _write_manifest(outdir, manifest)
    return outdir


def run_pipeline(config: PipelineConfig, n_jobs: int | None = None) -> Path:
    """Run every configured stage; returns the artifact directory.

    With a strata list, each stratum runs into its own sub-directory and
    a top-level manifest indexes them.
    """
    validate_config(config)
    _require(config, "output_dir")
    outdir = Path(config.output_dir)
    jobs = n_jobs if n_jobs is not None else config.threads
    if not config.strata:
        return _run_single(config, outdir, None, jobs)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = _manifest_skeleton(config, None)
    del manifest["stages"]
    manifest["strata"] = {}
    for stratum in config.strata:
        _run_single(config, outdir / stratum, stratum, jobs)
        manifest["strata"][stratum] = f"{stratum}/manifest.json"
    _write_manifest(outdir, manifest)
    return outdir


def grid_search(config: PipelineConfig, n_jobs: int | None = None) -> Path:
    """Score every (smoothing, rank) cell against the unordered pair list.

    Cells fail independently; the output table marks failed cells and
    flags the best-scoring one.
    """
    validate_config(config)
    _require(config, "output_dir", "comorbid_pairs")
    if not config.sigma_list or not config.q_list:
        raise ConfigError("grid search needs sigma_list and q_list")
    outdir = Path(config.output_dir)
    jobs = n_jobs if n_jobs is not None else config.threads
    stage_ingest(config, outdir)
    vocabulary, events, meta = _read_cohort(outdir)
    lookup = ev.load_pair_lookup(config.comorbid_pairs, vocabulary.codes)
    if lookup.ordered:
        raise ConfigError("grid search scores unordered pairs; got an ordered pair file")
    l = config.l_list[0]
    rows = []
    for sigma in config.sigma_list:
        stacked, _ = _assemble(config, vocabulary, events, meta, sigma)
        for q in config.q_list:
            seed = fit_seed(config.seed, sigma, q)
            try:
                best = _fit_best(stacked, config, q, seed, jobs)
                result = ev.evaluate(
                    best.clusters, vocabulary.codes, lookup, l,
                    n_perms=config.n_perms, seed=config.eval_seed, n_jobs=jobs,
                )
                score = result.observed.score
                rows.append({
                    "sigma": sigma, "q": q, "seed": seed,
                    "score": np.nan if score is None else score,
                    "p_value": np.nan if result.p_value is None else result.p_value,
                    "status": "ok",
                })
                log.info("grid cell sigma=%g q=%d: score=%s", sigma, q, score)
            except Exception as exc:
                rows.append({
                    "sigma": sigma, "q": q, "seed": seed,
                    "score": np.nan, "p_value": np.nan,
                    "status": f"failed:{type(exc).__name__}",
                })
                log.warning("grid cell sigma=%g q=%d failed: %s", sigma, q, exc)
    best_index = None
    for i, row in enumerate(rows):
        if row["status"] == "ok" and not np.isnan(row["score"]):
            if best_index is None or row["score"] > rows[best_index]["score"]:
                best_index = i
    stage_dir = outdir / "grid"
    stage_dir.mkdir(parents=True, exist_ok=True)
    lines = ["sigma\tq\tl\tseed\tscore\tp_value\tstatus\tbest"]
    for i, row in enumerate(rows):
        lines.append(
            f"{row['sigma']:.10g}\t{row['q']}\t{l}\t{row['seed']}"
            f"\t{row['score']:.10g}\t{row['p_value']:.10g}"
            f"\t{row['status']}\t{int(i == best_index)}"
        )
    path = stage_dir / "scores.tsv"
    path.write_text("\n".join(lines) + "\n")
    return path


def simulate(
    q: int,
    c: int,
    t: int,
    n_patients: int,
    noise_rate: float,
    seed: int,
    outdir,
) -> Path:
    """Generate a planted cohort on disk, ready to run the pipeline on."""
    model = synth.make_disjoint_model(q=q, c=c, t=t, noise_rate=noise_rate)
    events, metas, vocabulary = synth.generate_cohort(model, n_patients, seed=seed)
    return synth.write_cohort(Path(outdir), model, events, metas, vocabulary, seed)
