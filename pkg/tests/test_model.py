import numpy as np
import pytest

from madapt import autodiff as ad
from madapt.adapters import init_bank
from madapt.errors import ContractError, DimensionError, ValidationError
from madapt.model import (
    Batch,
    ModalitySubset,
    ModelSpec,
    build_model,
    duplicate_fill,
    extract_fused_feature,
    forward,
    leaves_from,
    parameter_schema,
    run_network,
    zero_fill,
)

from _oracles import grad_mismatches, numerical_grad, reference_logits


def random_batch(spec, n=5, seed=0):
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=(n, spec.tokens_per_modality, w)) for w in spec.input_dims]
    return Batch(xs, rng.integers(0, spec.num_classes, n))


@pytest.fixture
def spec():
    return ModelSpec(num_modalities=2, input_dims=(3, 3), tokens_per_modality=2,
                     embed_dim=4, encoder_depth=2, num_classes=3, seed=42)


class TestModelSpec:
    @pytest.mark.parametrize("field,value", [
        ("num_classes", 1), ("num_modalities", 1), ("embed_dim", 1),
        ("encoder_depth", 0), ("fusion", "attention"),
    ])
    def test_invalid_field_named(self, field, value):
        kwargs = {field: value}
        if field == "num_modalities":
            kwargs["input_dims"] = (12,)
        with pytest.raises(ValidationError, match=field):
            ModelSpec(**kwargs)

    def test_round_trip_dict(self, spec):
        assert ModelSpec.from_dict(spec.to_dict()) == spec


class TestBuildModel:
    def test_deterministic(self, spec):
        a, b = build_model(spec), build_model(spec)
        assert a.names() == b.names()
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_schema_for_two_modalities(self):
        spec = ModelSpec(num_modalities=2, embed_dim=8, encoder_depth=2)
        names = [n for n, _ in parameter_schema(spec)]
        expected = []
        for m in range(2):
            expected += [f"enc{m}.embed.weight", f"enc{m}.embed.bias"]
            for j in range(2):
                expected += [f"enc{m}.block{j}.linear.weight", f"enc{m}.block{j}.linear.bias",
                             f"enc{m}.block{j}.norm.gain", f"enc{m}.block{j}.norm.bias"]
        expected += ["fusion.linear.weight", "fusion.linear.bias",
                     "fusion.norm.gain", "fusion.norm.bias", "head.weight", "head.bias"]
        assert names == expected
        assert build_model(spec).names() == expected

    def test_init_ranges(self, spec):
        theta = build_model(spec)
        for name, arr in theta.params.items():
            if name.endswith(".weight"):
                assert np.all(np.abs(arr) <= 1 / np.sqrt(arr.shape[0]))
            elif name.endswith(".gain"):
                assert np.all(arr == 1)
            else:
                assert np.all(arr == 0)

    def test_different_seeds_differ(self, spec):
        other = ModelSpec(**{**spec.to_dict(), "seed": 43})
        assert not np.array_equal(build_model(spec).params["head.weight"],
                                  build_model(other).params["head.weight"])


class TestSubsets:
    def test_lists(self):
        s = ModalitySubset.of([0, 2], 3)
        assert s.mask == 0b101
        assert s.available == [0, 2]
        assert s.missing == [1]

    def test_empty_rejected_by_forward(self, spec):
        with pytest.raises(ContractError):
            forward(build_model(spec), random_batch(spec), ModalitySubset(0, 2))


class TestFill:
    def test_zero_fill_full_is_identity(self, spec):
        b = random_batch(spec)
        out = zero_fill(b, ModalitySubset.full(2))
        for x, y in zip(b.xs, out.xs):
            assert x.tobytes() == y.tobytes()

    def test_zero_fill_missing(self, spec):
        b = random_batch(spec)
        out = zero_fill(b, ModalitySubset.of([0], 2))
        assert np.all(out.xs[1] == 0)
        assert out.xs[0].tobytes() == b.xs[0].tobytes()

    def test_zero_fill_idempotent(self, spec):
        b = random_batch(spec)
        s = ModalitySubset.of([1], 2)
        once = zero_fill(b, s)
        twice = zero_fill(once, s)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(once.xs, twice.xs))

    def test_zero_fill_empty_subset(self, spec):
        with pytest.raises(ContractError):
            zero_fill(random_batch(spec), ModalitySubset(0, 2))

    def test_duplicate_fill(self, spec):
        b = random_batch(spec)
        out = duplicate_fill(b, ModalitySubset.of([0], 2), source=0)
        assert out.xs[1].tobytes() == b.xs[0].tobytes()
        same = duplicate_fill(b, ModalitySubset.full(2))
        assert all(x.tobytes() == y.tobytes() for x, y in zip(b.xs, same.xs))

    def test_duplicate_source_must_be_available(self, spec):
        with pytest.raises(ContractError):
            duplicate_fill(random_batch(spec), ModalitySubset.of([0], 2), source=1)

    def test_duplicate_width_mismatch(self):
        spec = ModelSpec(num_modalities=2, input_dims=(3, 4))
        with pytest.raises(DimensionError):
            duplicate_fill(random_batch(spec), ModalitySubset.of([0], 2), source=0)


class TestForward:
    def test_full_subset_matches_zero_filled_full(self, spec):
        theta, b = build_model(spec), random_batch(spec)
        full = ModalitySubset.full(2)
        assert forward(theta, b, full).tobytes() == forward(theta, zero_fill(b, full), full).tobytes()

    def test_missing_slot_values_ignored(self, spec):
        theta, b = build_model(spec), random_batch(spec)
        s = ModalitySubset.of([0], 2)
        planted = Batch([b.xs[0], np.random.default_rng(9).normal(size=b.xs[1].shape) * 100], b.labels)
        assert forward(theta, b, s).tobytes() == forward(theta, planted, s).tobytes()

    @pytest.mark.parametrize("fusion", ["concat_linear", "mean_pool_linear"])
    def test_matches_loop_reference(self, fusion):
        spec = ModelSpec(num_modalities=2, input_dims=(3, 5), tokens_per_modality=3,
                         embed_dim=4, encoder_depth=2, fusion=fusion, num_classes=3, seed=42)
        theta = build_model(spec)
        # perturb the zero/one initial values so every parameter matters
        rng = np.random.default_rng(1)
        for k in theta.params:
            theta.params[k] = theta.params[k] + rng.normal(scale=0.3, size=theta.params[k].shape)
        b = random_batch(spec, n=1, seed=3)
        for avail in ([0, 1], [0], [1]):
            s = ModalitySubset.of(avail, 2)
            got = forward(theta, b, s)[0]
            ref = reference_logits(spec, theta.params, [x[0].tolist() for x in b.xs], avail)
            np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)

    def test_identity_bank_value_equal(self, spec):
        theta, b = build_model(spec), random_batch(spec)
        s = ModalitySubset.of([1], 2)
        bank = init_bank(spec, s, "scale_shift")
        np.testing.assert_array_equal(forward(theta, b, s, bank), forward(theta, b, s))

    def test_bank_subset_mismatch(self, spec):
        theta, b = build_model(spec), random_batch(spec)
        bank = init_bank(spec, ModalitySubset.of([0], 2), "scale_shift")
        with pytest.raises(ContractError):
            forward(theta, b, ModalitySubset.of([1], 2), bank)

    def test_bank_spec_mismatch(self, spec):
        theta, b = build_model(spec), random_batch(spec)
        other = ModelSpec(**{**spec.to_dict(), "embed_dim": 6})
        s = ModalitySubset.of([0], 2)
        with pytest.raises(ContractError):
            forward(theta, b, s, init_bank(other, s, "scale_shift"))

    def test_wrong_input_shape(self, spec):
        theta = build_model(spec)
        b = Batch([np.zeros((2, 2, 3)), np.zeros((2, 2, 4))], [0, 1])
        with pytest.raises(DimensionError):
            forward(theta, b, ModalitySubset.full(2))


class TestFusedFeature:
    @pytest.mark.parametrize("fusion", ["concat_linear", "mean_pool_linear"])
    def test_shape(self, fusion):
        spec = ModelSpec(embed_dim=6, fusion=fusion)
        f = extract_fused_feature(build_model(spec), random_batch(spec, n=7), ModalitySubset.full(2))
        assert f.shape == (7, 6)

    def test_deterministic(self, spec):
        theta, b = build_model(spec), random_batch(spec)
        s = ModalitySubset.of([0], 2)
        assert extract_fused_feature(theta, b, s).tobytes() == extract_fused_feature(theta, b, s).tobytes()


@pytest.mark.parametrize("fusion", ["concat_linear", "mean_pool_linear"])
def test_composite_gradient(fusion):
    spec = ModelSpec(num_modalities=2, input_dims=(3, 2), tokens_per_modality=2,
                     embed_dim=4, encoder_depth=1, fusion=fusion, num_classes=3, seed=42)
    theta = build_model(spec)
    rng = np.random.default_rng(42)
    for k in theta.params:
        theta.params[k] = theta.params[k] + rng.uniform(-0.5, 0.5, theta.params[k].shape)
    b = random_batch(spec, n=3, seed=42)
    full = ModalitySubset.full(2)

    def loss_value():
        P = leaves_from(theta.params, False)
        logits, _ = run_network(spec, P, b.xs, full)
        return ad.softmax_cross_entropy(logits, b.labels).item()

    P = leaves_from(theta.params, True)
    with ad.Tape() as tape:
        logits, _ = run_network(spec, P, b.xs, full)
        loss = ad.softmax_cross_entropy(logits, b.labels)
    ad.backward(loss, tape)
    names = list(theta.params)
    numeric = numerical_grad(loss_value, [theta.params[k] for k in names])
    for name, num in zip(names, numeric):
        assert grad_mismatches(P[name].grad, num) == [], name
