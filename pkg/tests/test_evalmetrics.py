import numpy as np
import pytest

from geoprompt.embedcore import Rng
from geoprompt.errors import (
    EmptyEvalSetError,
    StructureMismatchError,
    UnknownGroupKeyError,
)
from geoprompt.evalmetrics import (
    SampleMeta,
    balanced_accuracy,
    build_report,
    delta_table,
    difficulty_strata,
    group_report,
    load_manifest,
    per_class_recall,
    save_manifest,
)


def oracle_balanced_accuracy(ranked, labels, k):
    """Independent per-class recall implementation (dict-of-lists style)."""
    samples_by_class = {}
    for r, y in zip(ranked, labels):
        samples_by_class.setdefault(y, []).append(r)
    recalls = []
    for y, rankings in samples_by_class.items():
        hit = sum(1 for r in rankings if y in list(r)[:k])
        recalls.append(hit / len(rankings))
    return sum(recalls) / len(recalls)


def random_prediction_set(gen, n_classes, n_samples):
    classes = [f"c{i}" for i in range(n_classes)]
    labels = [classes[int(gen.integers(0, n_classes))] for _ in range(n_samples)]
    ranked = []
    for _ in range(n_samples):
        order = list(gen.permutation(n_classes))
        ranked.append([classes[i] for i in order])
    return ranked, labels


class TestBalancedAccuracy:
    def test_hand_counted_example(self):
        labels = ["A", "A", "B", "B"]
        ranked = [["A", "B"], ["A", "B"], ["B", "A"], ["A", "B"]]
        assert balanced_accuracy(ranked, labels, k=1) == pytest.approx(0.75)

    def test_perfect_predictor(self):
        labels = ["A", "B", "C"]
        ranked = [[y] for y in labels]
        assert balanced_accuracy(ranked, labels, k=1) == 1.0

    def test_matches_oracle_on_random_sets(self):
        gen = Rng(31).generator
        for _ in range(30):
            n_classes = int(gen.integers(2, 5))
            ranked, labels = random_prediction_set(gen, n_classes,
                                                   int(gen.integers(10, 200)))
            for k in (1, 2):
                assert balanced_accuracy(ranked, labels, k) == \
                    oracle_balanced_accuracy(ranked, labels, k)

    def test_duplication_invariance(self):
        gen = Rng(32).generator
        ranked, labels = random_prediction_set(gen, 4, 60)
        dup_ranked = ranked * 3
        dup_labels = labels * 3
        assert balanced_accuracy(dup_ranked, dup_labels, 1) == \
            pytest.approx(balanced_accuracy(ranked, labels, 1), abs=1e-12)

    def test_empty_set(self):
        with pytest.raises(EmptyEvalSetError):
            balanced_accuracy([], [], 1)

    def test_topk_recall(self):
        labels = ["A", "B"]
        ranked = [["B", "A"], ["A", "B"]]
        assert balanced_accuracy(ranked, labels, k=1) == 0.0
        assert balanced_accuracy(ranked, labels, k=2) == 1.0


def _metas(labels, countries=None, continents=None, incomes=None):
    n = len(labels)
    countries = countries or ["X"] * n
    continents = continents or ["Asia"] * n
    incomes = incomes or ["low"] * n
    return [SampleMeta(id=f"s{i}", label=labels[i], country=countries[i],
                       continent=continents[i], income_bucket=incomes[i],
                       split="target") for i in range(n)]


class TestGroupReport:
    def test_single_group_equals_global(self):
        labels = ["A", "B", "A"]
        ranked = [["A", "B"], ["A", "B"], ["B", "A"]]
        metas = _metas(labels)
        groups = group_report(ranked, metas, "continent", ks=(1,))
        assert list(groups) == ["Asia"]
        assert groups["Asia"].balanced_acc[1] == \
            pytest.approx(balanced_accuracy(ranked, labels, 1))

    def test_two_disjoint_continents(self):
        labels = ["A", "A", "B", "B"]
        ranked = [["A"], ["A"], ["B"], ["A"]]
        ranked = [r + (["B"] if r == ["A"] else ["A"]) for r in ranked]
        metas = _metas(labels, continents=["Africa", "Africa", "Asia", "Asia"])
        groups = group_report(ranked, metas, "continent", ks=(1,))
        assert groups["Africa"].balanced_acc[1] == 1.0
        assert groups["Asia"].balanced_acc[1] == pytest.approx(0.5)

    def test_random_groups_match_filter_oracle(self):
        gen = Rng(33).generator
        ranked, labels = random_prediction_set(gen, 3, 120)
        incomes = [["low", "medium", "high"][int(gen.integers(0, 3))]
                   for _ in labels]
        metas = _metas(labels, incomes=incomes)
        groups = group_report(ranked, metas, "income_bucket", ks=(1,))
        for bucket, report in groups.items():
            idx = [i for i, m in enumerate(metas) if m.income_bucket == bucket]
            expected = balanced_accuracy([ranked[i] for i in idx],
                                         [labels[i] for i in idx], 1)
            assert report.balanced_acc[1] == pytest.approx(expected, abs=1e-15)

    def test_concatenated_groups_reproduce_global(self):
        gen = Rng(34).generator
        ranked, labels = random_prediction_set(gen, 4, 90)
        continents = [["Africa", "Asia", "Europe"][int(gen.integers(0, 3))]
                      for _ in labels]
        metas = _metas(labels, continents=continents)
        groups = group_report(ranked, metas, "continent", ks=(1,))
        regrouped_ranked, regrouped_labels = [], []
        for continent in groups:
            for i, m in enumerate(metas):
                if m.continent == continent:
                    regrouped_ranked.append(ranked[i])
                    regrouped_labels.append(labels[i])
        assert balanced_accuracy(regrouped_ranked, regrouped_labels, 1) == \
            balanced_accuracy(ranked, labels, 1)

    def test_unknown_key(self):
        with pytest.raises(UnknownGroupKeyError):
            group_report([["A"]], _metas(["A"]), "favorite_color")


class TestDifficultyStrata:
    BASELINE = {"A": 0.30, "B": 0.50, "C": 0.90}
    METHOD = {"A": 0.40, "B": 0.55, "C": 0.85}

    def test_single_threshold_selection(self):
        rows = difficulty_strata(self.BASELINE, self.METHOD, thresholds=(40,))
        assert rows[0].classes == ["A"]
        assert rows[0].n_classes == 1
        assert rows[0].method_mean == pytest.approx(0.40)

    def test_default_thresholds(self):
        rows = difficulty_strata(self.BASELINE, self.METHOD)
        assert [r.threshold for r in rows] == [40.0, 60.0, 80.0, 100.0]

    def test_top_threshold_covers_all_classes(self):
        rows = difficulty_strata(self.BASELINE, self.METHOD, thresholds=(100,))
        assert rows[0].classes == ["A", "B", "C"]
        assert rows[0].method_mean == pytest.approx(
            sum(self.METHOD.values()) / 3)

    def test_boundary_is_strict_below_100(self):
        rows = difficulty_strata(self.BASELINE, self.METHOD, thresholds=(50,))
        assert rows[0].classes == ["A"]  # B at exactly 50% is excluded

    def test_empty_stratum_gives_null_cell(self):
        rows = difficulty_strata(self.BASELINE, self.METHOD, thresholds=(5,))
        assert rows[0].n_classes == 0
        assert rows[0].method_mean is None
        assert rows[0].delta is None

    def test_aggressive_small_threshold_supported(self):
        baseline = {f"c{i}": i / 100.0 for i in range(100)}
        method = {c: 0.5 for c in baseline}
        rows = difficulty_strata(baseline, method, thresholds=(5,))
        assert rows[0].n_classes == 5


class TestDeltaTable:
    def test_identical_reports_zero(self):
        a = {"total": 0.5, "groups": {"Africa": 0.4}}
        assert delta_table(a, a) == {"total": 0.0, "groups": {"Africa": 0.0}}

    def test_paper_style_delta(self):
        # 43.7 -> 45.2 reads as +1.5
        a, b = {"Africa": 43.7}, {"Africa": 45.2}
        assert delta_table(a, b)["Africa"] == pytest.approx(1.5)

    def test_antisymmetry(self):
        a = {"x": 1.0, "y": {"z": 3.0}}
        b = {"x": 4.0, "y": {"z": 1.0}}
        forward = delta_table(a, b)
        backward = delta_table(b, a)
        assert forward["x"] == -backward["x"]
        assert forward["y"]["z"] == -backward["y"]["z"]

    def test_missing_cells_null(self):
        assert delta_table({"x": 1.0}, {"x": 2.0, "y": 3.0})["y"] is None

    def test_structure_mismatch(self):
        with pytest.raises(StructureMismatchError):
            delta_table({"x": 1.0}, {"x": {"nested": 1.0}})


class TestManifest:
    def test_round_trip(self, tmp_path):
        samples = _metas(["A", "B"], countries=["geo_0", "geo_1"],
                         continents=["Africa", "Asia"],
                         incomes=["low", "high"])
        path = tmp_path / "manifest.jsonl"
        save_manifest(samples, path)
        assert load_manifest(path) == samples


class TestReportInvariant:
    def test_balanced_equals_mean_of_recalls(self):
        gen = Rng(35).generator
        ranked, labels = random_prediction_set(gen, 5, 150)
        report = build_report(ranked, labels, ks=(1, 3))
        for k in (1, 3):
            mean_recall = float(np.mean(list(report.per_class_recall[k].values())))
            assert report.balanced_acc[k] == pytest.approx(mean_recall, abs=1e-12)
