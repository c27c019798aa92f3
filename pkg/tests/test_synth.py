"""Planted-structure cohorts and cluster matching against ground truth."""

import json

import numpy as np
import pytest

from tcnmf.synth import (
    PlantedModel,
    default_codes,
    generate_cohort,
    hazard,
    make_disjoint_model,
    match_clusters,
    write_cohort,
)


class TestPlantedModel:
    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            PlantedModel(loadings=np.ones((2, 4)), templates=np.ones((3, 10)))

    def test_negative_values_rejected(self):
        with pytest.raises(ValueError):
            PlantedModel(loadings=-np.ones((2, 4)), templates=np.ones((2, 10)))

    def test_invalid_noise_rate(self):
        model = make_disjoint_model(q=2, c=4, t=10)
        with pytest.raises(ValueError):
            PlantedModel(
                loadings=model.loadings, templates=model.templates, noise_rate=1.0
            )

    def test_shared_dominant_disease_rejected(self):
        loadings = np.asarray([[1.0, 0.2], [0.9, 0.1]])
        with pytest.raises(ValueError):
            PlantedModel(loadings=loadings, templates=np.ones((2, 6)))


class TestMakeDisjointModel:
    def test_disease_supports_are_disjoint(self):
        model = make_disjoint_model(q=3, c=12, t=30)
        support = model.loadings > 0
        assert np.all(support.sum(axis=0) <= 1)
        assert np.all(support.sum(axis=1) == 4)

    def test_age_windows_are_disjoint(self):
        model = make_disjoint_model(q=3, c=12, t=30)
        active = model.templates > 0
        assert np.all(active.sum(axis=0) <= 1)
        # margin ages stay silent
        assert not active[:, :2].any()

    def test_every_cluster_has_activity(self):
        model = make_disjoint_model(q=5, c=30, t=60)
        assert np.all(model.templates.max(axis=1) > 0)
        assert np.all(model.loadings.max(axis=1) == 1.0)

    def test_peak_rate_caps_templates(self):
        model = make_disjoint_model(q=2, c=6, t=20, peak_rate=0.3)
        assert model.templates.max() == pytest.approx(0.3)

    def test_too_small_dimensions_rejected(self):
        with pytest.raises(ValueError):
            make_disjoint_model(q=4, c=3, t=30)
        with pytest.raises(ValueError):
            make_disjoint_model(q=4, c=8, t=9)
        with pytest.raises(ValueError):
            make_disjoint_model(q=1, c=8, t=30)


class TestHazard:
    def test_zero_strengths_leave_noise_floor(self):
        model = make_disjoint_model(q=2, c=4, t=10, noise_rate=0.01)
        rates = hazard(model, np.zeros(2))
        np.testing.assert_allclose(rates, 0.01)

    def test_scales_with_strength(self):
        model = make_disjoint_model(q=2, c=4, t=10)
        weak = hazard(model, np.asarray([1.0, 1.0]))
        strong = hazard(model, np.asarray([2.0, 2.0]))
        np.testing.assert_allclose(strong, np.minimum(2 * weak, 1.0), atol=1e-15)

    def test_clipped_to_probability_range(self):
        model = make_disjoint_model(q=2, c=4, t=10, peak_rate=0.9)
        rates = hazard(model, np.asarray([50.0, 50.0]))
        assert rates.max() <= 1.0
        assert rates.min() >= 0.0


class TestGenerateCohort:
    def test_deterministic(self):
        model = make_disjoint_model(q=2, c=6, t=20)
        first = generate_cohort(model, n_patients=30, seed=11)
        second = generate_cohort(model, n_patients=30, seed=11)
        assert first[0] == second[0]
        assert first[1] == second[1]

    def test_seed_changes_events(self):
        model = make_disjoint_model(q=2, c=6, t=20)
        a, _, _ = generate_cohort(model, n_patients=30, seed=1)
        b, _, _ = generate_cohort(model, n_patients=30, seed=2)
        assert a != b

    def test_first_incidence_unique_per_patient_and_code(self):
        model = make_disjoint_model(q=3, c=9, t=30, noise_rate=0.01)
        events, _, _ = generate_cohort(model, n_patients=40, seed=3)
        seen = [(e.patient_id, e.code) for e in events]
        assert len(seen) == len(set(seen))

    def test_events_only_in_active_windows_without_noise(self):
        model = make_disjoint_model(q=2, c=6, t=20, noise_rate=0.0)
        events, _, vocabulary = generate_cohort(model, n_patients=60, seed=4)
        assert events
        active = model.templates.T @ model.loadings > 0
        for e in events:
            assert active[e.age_years, vocabulary.index[e.code]]

    def test_metadata_covers_full_followup(self):
        model = make_disjoint_model(q=2, c=6, t=20)
        _, metas, _ = generate_cohort(model, n_patients=5, seed=0)
        assert len(metas) == 5
        assert all(m.registration_age_years == 0 for m in metas)
        assert all(m.followup_years == model.t for m in metas)
        assert [m.patient_id for m in metas] == [f"p{i:05d}" for i in range(5)]

    def test_zero_patients_warns(self):
        model = make_disjoint_model(q=2, c=6, t=20)
        with pytest.warns(UserWarning, match="no events"):
            events, metas, _ = generate_cohort(model, n_patients=0, seed=0)
        assert events == []
        assert metas == []

    def test_negative_patients_rejected(self):
        model = make_disjoint_model(q=2, c=6, t=20)
        with pytest.raises(ValueError):
            generate_cohort(model, n_patients=-1)

    def test_vocabulary_matches_model(self):
        model = make_disjoint_model(q=2, c=6, t=20)
        _, _, vocabulary = generate_cohort(model, n_patients=2, seed=0)
        assert list(vocabulary.codes) == default_codes(6)


class TestWriteCohort:
    def test_writes_all_artifacts(self, tmp_path):
        model = make_disjoint_model(q=2, c=6, t=20)
        events, metas, vocabulary = generate_cohort(model, n_patients=10, seed=5)
        directory = write_cohort(tmp_path / "cohort", model, events, metas, vocabulary, seed=5)
        for name in ("events.csv", "metadata.csv", "vocabulary.txt", "ground_truth.json"):
            assert (directory / name).exists()
        truth = json.loads((directory / "ground_truth.json").read_text())
        assert truth["seed"] == 5
        assert truth["n_patients"] == 10
        np.testing.assert_allclose(np.asarray(truth["loadings"]), model.loadings)

    def test_round_trips_through_ingest(self, tmp_path):
        from tcnmf.ingest import DiseaseVocabulary, load_events, load_metadata

        model = make_disjoint_model(q=2, c=6, t=20, noise_rate=0.005)
        events, metas, vocabulary = generate_cohort(model, n_patients=20, seed=6)
        directory = write_cohort(tmp_path / "cohort", model, events, metas, vocabulary, seed=6)
        reloaded_vocab = DiseaseVocabulary.from_file(directory / "vocabulary.txt")
        loaded, summary = load_events(
            directory / "events.csv", reloaded_vocab, t_max=model.t
        )
        key = lambda e: (e.patient_id, e.code)
        assert sorted(loaded, key=key) == sorted(events, key=key)
        assert summary.rejected == 0
        assert load_metadata(directory / "metadata.csv")[0] == metas


class TestMatchClusters:
    def test_identity_match(self):
        reference = make_disjoint_model(q=3, c=12, t=30).loadings
        match = match_clusters(reference, reference)
        assert match.pairs == ((0, 0), (1, 1), (2, 2))
        assert match.mean_cosine == pytest.approx(1.0, abs=1e-12)

    def test_invariant_to_row_permutation_and_scaling(self):
        reference = make_disjoint_model(q=3, c=12, t=30).loadings
        shuffled = reference[[2, 0, 1]] * np.asarray([[3.0], [0.5], [7.0]])
        match = match_clusters(shuffled, reference)
        assert match.pairs == ((0, 2), (1, 0), (2, 1))
        assert match.mean_cosine == pytest.approx(1.0, abs=1e-12)

    def test_zero_row_scores_zero(self):
        reference = make_disjoint_model(q=2, c=8, t=20).loadings
        estimated = reference.copy()
        estimated[1] = 0.0
        match = match_clusters(estimated, reference)
        assert match.cosines[0] == pytest.approx(1.0, abs=1e-12)
        assert match.cosines[1] == 0.0

    def test_column_count_mismatch_rejected(self):
        with pytest.raises(ValueError):
            match_clusters(np.ones((2, 5)), np.ones((2, 6)))

    def test_assignment_maximizes_total_cosine(self):
        # the greedy pairing (row 0 -> ref 0) is suboptimal here
        reference = np.asarray([[1.0, 0.0, 0.0], [0.6, 0.8, 0.0]])
        estimated = np.asarray([[0.8, 0.6, 0.0], [1.0, 0.0, 0.0]])
        match = match_clusters(estimated, reference)
        assert match.pairs == ((0, 1), (1, 0))

    def test_random_rows_score_below_planted(self):
        rng = np.random.default_rng(9)
        reference = make_disjoint_model(q=4, c=24, t=40).loadings
        worst = max(
            match_clusters(rng.random((4, 24)), reference).mean_cosine
            for _ in range(100)
        )
        assert worst < 0.8
