"""Evaluation metrics: confusion matrix, mIoU, CCD, PDD, centroid similarity."""
import numpy as np
import pytest

from t2sda.analysis import (FeatureBank, ccd, confusion_matrix,
                            cross_domain_similarity, emit_report, miou,
                            parse_report, pdd)
from t2sda.errors import (ClassMissing, DegeneratePairWarning, EmptyMatrix,
                          NegativeDenominatorWarning)
from t2sda.numerics import IGNORE, Rng


class TestConfusionMatrix:
    def test_counts(self):
        truth = np.array([0, 0, 1, 1, 2])
        pred = np.array([0, 1, 1, 1, 0])
        cm = confusion_matrix(truth, pred, 3)
        want = np.array([[1, 1, 0], [0, 2, 0], [1, 0, 0]])
        np.testing.assert_array_equal(cm, want)

    def test_ignore_skipped(self):
        truth = np.array([0, IGNORE])
        pred = np.array([0, 0])
        assert confusion_matrix(truth, pred, 2).sum() == 1

    def test_perfect_prediction_diagonal(self):
        gen = Rng(0).stream("cm")
        truth = gen.integers(0, 4, size=100)
        cm = confusion_matrix(truth, truth, 4)
        assert (cm == np.diag(np.diag(cm))).all()


class TestMiou:
    def test_perfect_is_one(self):
        cm = np.diag([5, 3, 2])
        per_class, mean = miou(cm)
        np.testing.assert_allclose(per_class, 1.0)
        assert mean == 1.0

    def test_hand_computed(self):
        cm = np.array([[3, 1], [2, 4]])
        per_class, mean = miou(cm)
        # IoU_0 = 3 / (3 + 1 + 2), IoU_1 = 4 / (4 + 1 + 2)
        assert per_class[0] == pytest.approx(0.5)
        assert per_class[1] == pytest.approx(4 / 7)
        assert mean == pytest.approx((0.5 + 4 / 7) / 2)

    def test_absent_class_excluded(self):
        cm = np.array([[4, 0, 0], [0, 4, 0], [0, 0, 0]])
        per_class, mean = miou(cm)
        assert np.isnan(per_class[2])
        assert mean == 1.0

    def test_empty_matrix(self):
        with pytest.raises(EmptyMatrix):
            miou(np.zeros((3, 3), dtype=int))


def tight_bank(spread=0.01, gap=10.0, seed=0):
    """Two well-separated classes in both domains."""
    gen = Rng(seed).stream("b")
    bank = FeatureBank()
    for domain in ("source", "target"):
        for c, base in ((0, 0.0), (1, gap)):
            rows = base + gen.normal(0, spread, size=(30, 4))
            bank.add(domain, c, rows)
    return bank


class TestCcd:
    def test_tight_clusters_small(self):
        assert ccd(tight_bank(spread=0.01), 0) < ccd(tight_bank(spread=1.0), 0)

    def test_hand_computed_two_points(self):
        bank = FeatureBank()
        bank.add("target", 0, np.array([[0.0, 0.0], [2.0, 0.0]]))
        bank.add("target", 1, np.array([[5.0, 0.0]]))
        # center_0 = (1, 0), intra = mean(1, 1) = 1, gap = 16
        assert ccd(bank, 0) == pytest.approx(1 / 16)

    def test_coinciding_centers_warn(self):
        bank = FeatureBank()
        bank.add("target", 0, np.array([[1.0, 0.0], [-1.0, 0.0]]))
        bank.add("target", 1, np.array([[0.0, 1.0], [0.0, -1.0]]))
        with pytest.warns(DegeneratePairWarning):
            ccd(bank, 0)

    def test_missing_class(self):
        bank = FeatureBank()
        bank.add("target", 0, np.ones((3, 2)))
        with pytest.raises(ClassMissing):
            ccd(bank, 0)


class TestPdd:
    def test_hand_computed(self):
        bank = FeatureBank()
        bank.add("target", 0, np.array([[1.0, 0.0], [1.0, 0.0]]))
        bank.add("target", 1, np.array([[1.0, 1.0]]))
        # own cosine = 1, other cosine = cos(45 deg)
        other = 1.0 / np.sqrt(2)
        assert pdd(bank, 0) == pytest.approx(1.0 - 1.0 / (other + 1e-8),
                                             abs=1e-9)

    def test_angularly_separated_classes_lower(self):
        def directional_bank(angles):
            gen = Rng(3).stream("p")
            bank = FeatureBank()
            for c, ang in enumerate(angles):
                base = np.array([np.cos(ang), np.sin(ang)])
                rows = base + gen.normal(0, 0.02, size=(30, 2))
                bank.add("target", c, rows)
            return bank

        spread = directional_bank([0.0, np.pi / 4, np.pi / 2])
        bunched = directional_bank([0.0, 0.15, 0.3])
        assert pdd(spread, 0) < pdd(bunched, 0)

    def test_negative_denominator_warns(self):
        bank = FeatureBank()
        bank.add("target", 0, np.array([[1.0, 0.0], [1.0, 0.1]]))
        bank.add("target", 1, np.array([[-1.0, 0.0]]))
        with pytest.warns(NegativeDenominatorWarning):
            pdd(bank, 0)

    def test_missing_class(self):
        with pytest.raises(ClassMissing):
            pdd(FeatureBank(), 0)


class TestCrossDomainSimilarity:
    def test_aligned_centroids_near_one(self):
        sims = cross_domain_similarity(tight_bank(spread=0.001, seed=2))
        assert sims[1] == pytest.approx(1.0, abs=1e-3)

    def test_opposed_centroids_negative(self):
        bank = FeatureBank()
        bank.add("source", 0, np.array([[1.0, 0.0]]))
        bank.add("target", 0, np.array([[-1.0, 0.0]]))
        assert cross_domain_similarity(bank)[0] == pytest.approx(-1.0, abs=1e-9)

    def test_one_sided_class_maps_to_none(self):
        bank = FeatureBank()
        bank.add("source", 0, np.array([[1.0, 0.0]]))
        assert cross_domain_similarity(bank)[0] is None


class TestReport:
    def test_round_trip(self, tmp_path):
        rows = [("run_a", 100, "miou", "", 0.75),
                ("run_a", 100, "iou", "0", 0.6),
                ("run_a", 100, "iou", "1", 0.9)]
        files = emit_report(rows, str(tmp_path))
        back = parse_report(str(tmp_path / "metrics.csv"))
        assert back == [("run_a", 100, "miou", "", 0.75),
                        ("run_a", 100, "iou", "0", 0.6),
                        ("run_a", 100, "iou", "1", 0.9)]
        svgs = [f for f in files if f.endswith(".svg")]
        assert svgs
        for f in svgs:
            text = open(f).read()
            assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
