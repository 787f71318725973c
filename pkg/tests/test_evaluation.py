import numpy as np
import pytest

from madapt.adapters import init_bank
from madapt.errors import ContractError, DimensionError
from madapt.evaluation import (
    EvalArm,
    compute_metrics,
    cosine_similarity,
    cosine_similarity_analysis,
    evaluate_arm,
)
from madapt.model import Batch, ModalitySubset, ModelSpec, build_model


class TestMetrics:
    def test_perfect(self):
        m = compute_metrics([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert m.accuracy == m.macro_f1 == m.mean_per_class_accuracy == 1.0

    def test_worked_example(self):
        m = compute_metrics([0, 0, 1, 1], [0, 1, 1, 1], 2)
        assert m.accuracy == 0.75
        assert m.per_class[0].f1 == pytest.approx(2 / 3, abs=1e-15)
        assert m.per_class[1].f1 == pytest.approx(0.8, abs=1e-15)
        assert m.macro_f1 == pytest.approx(0.7333, abs=1e-4)
        assert m.mean_per_class_accuracy == pytest.approx(0.8333, abs=1e-4)

    def test_absent_class_flagged(self):
        m = compute_metrics([0, 1], [0, 1], 3)
        assert m.per_class[2].absent
        assert m.per_class[2].f1 == 0.0
        assert m.macro_f1 == pytest.approx(2 / 3)
        assert not m.per_class[0].absent

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            compute_metrics([0, 1], [0], 2)

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            compute_metrics([0, 2], [0, 1], 2)

    def test_bounds(self):
        rng = np.random.default_rng(0)
        m = compute_metrics(rng.integers(0, 5, 100), rng.integers(0, 5, 100), 5)
        for v in (m.accuracy, m.macro_f1, m.mean_per_class_accuracy):
            assert 0.0 <= v <= 1.0
        assert len(m.per_class) == 5


class TestCosine:
    def test_identical(self):
        assert cosine_similarity([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])[0] == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 1.0])[0] == 0.0

    def test_zero_norm_is_nan(self):
        out = cosine_similarity([[0.0, 0.0], [1.0, 1.0]], [[1.0, 0.0], [2.0, 2.0]])
        assert np.isnan(out[0])
        assert out[1] == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            cosine_similarity([[1.0, 2.0]], [[1.0, 2.0, 3.0]])


@pytest.fixture
def setup():
    spec = ModelSpec(num_modalities=2, input_dims=(4, 4), tokens_per_modality=2,
                     embed_dim=6, num_classes=3, seed=7)
    rng = np.random.default_rng(7)
    batch = Batch([rng.normal(size=(40, 2, 4)) for _ in range(2)], rng.integers(0, 3, 40))
    return spec, build_model(spec).freeze(), batch


class TestArms:
    def test_identity_bank_matches_pretrained(self, setup):
        spec, theta, batch = setup
        for s in (ModalitySubset.of([0], 2), ModalitySubset.of([1], 2)):
            for kind in ("scale_shift", "lora", "norm_tune"):
                bank = init_bank(spec, s, kind, theta=theta)
                assert evaluate_arm("adapted", s, batch, theta, bank=bank) == evaluate_arm("pretrained", s, batch, theta)

    def test_full_subset_arms_agree(self, setup):
        spec, theta, batch = setup
        full = ModalitySubset.full(2)
        bank = init_bank(spec, full, "scale_shift")
        a = evaluate_arm("pretrained", full, batch, theta)
        assert a == evaluate_arm("adapted", full, batch, theta, bank=bank)
        assert a == evaluate_arm("duplication", full, batch, theta)

    def test_pure(self, setup):
        _, theta, batch = setup
        s = ModalitySubset.of([1], 2)
        assert evaluate_arm("pretrained", s, batch, theta) == evaluate_arm("pretrained", s, batch, theta)

    def test_planted_missing_values_ignored(self, setup):
        _, theta, batch = setup
        s = ModalitySubset.of([0], 2)
        planted = Batch([batch.xs[0], batch.xs[1] * 1000 + 5], batch.labels)
        assert evaluate_arm("pretrained", s, batch, theta) == evaluate_arm("pretrained", s, planted, theta)

    def test_dedicated_uses_its_own_model(self, setup):
        spec, theta, batch = setup
        s = ModalitySubset.of([0], 2)
        assert evaluate_arm("dedicated", s, batch, dedicated=theta) == evaluate_arm("pretrained", s, batch, theta)

    @pytest.mark.parametrize("arm,kwargs", [
        ("dedicated", {}), ("adapted", {"theta": "theta"}), ("pretrained", {}),
    ])
    def test_missing_resource_names_arm(self, setup, arm, kwargs):
        _, theta, batch = setup
        kw = {k: theta for k in kwargs}
        with pytest.raises(ContractError, match=arm):
            evaluate_arm(arm, ModalitySubset.of([0], 2), batch, **kw)

    def test_unknown_arm(self):
        with pytest.raises(ContractError):
            EvalArm.parse("ensemble")


class TestCosSimAnalysis:
    def test_full_subset_is_one(self, setup):
        _, theta, batch = setup
        rep = cosine_similarity_analysis(theta, None, ModalitySubset.full(2), batch)
        for v in rep.pretrained:
            assert v == pytest.approx(1.0, abs=1e-12)

    def test_bounds_and_identity_bank(self, setup):
        spec, theta, batch = setup
        s = ModalitySubset.of([1], 2)
        rep = cosine_similarity_analysis(theta, init_bank(spec, s, "scale_shift"), s, batch)
        for p, a in zip(rep.pretrained, rep.adapted):
            assert -1.0 <= p <= 1.0
            assert a == p
        assert rep.fraction_adapted_ge() == 1.0
        assert sum(rep.counts) == len(batch)

    def test_absent_class(self, setup):
        _, theta, batch = setup
        keep = batch.labels != 2
        rep = cosine_similarity_analysis(theta, None, ModalitySubset.of([0], 2), batch.take(keep))
        assert rep.pretrained[2] is None
        assert rep.counts[2] == 0
