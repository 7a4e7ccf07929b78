import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covsteer.model import (ChanceConstraintSet, MarkovChain, ModeDynamics, ModelParseError,
                            ModelSchemaError, ModelValidationError, MjlsModel, load_model,
                            model_from_dict, model_to_dict, models_equal, save_model, validate)
from covsteer.propagation import propagate_mode_distribution


@pytest.fixture
def doc(benchmark):
    model, cc = benchmark
    return model_to_dict(model, cc)


def test_benchmark_is_valid(benchmark):
    model, cc = benchmark
    report = validate(model, cc)
    assert report.ok, report.violations


def test_benchmark_first_step_mode_distribution(benchmark):
    rho = propagate_mode_distribution(benchmark[0].chain, 1)
    np.testing.assert_allclose(rho[1], [0.87, 0.13], atol=1e-15)


def test_non_stochastic_row_names_the_row(doc):
    doc["transition"][1] = [0.9, 0.2]
    with pytest.raises(ModelValidationError) as exc:
        model_from_dict(doc)
    assert any("transition row 1 not stochastic" in v for v in exc.value.violations)


def test_indefinite_input_weight_rejected(doc):
    doc["R"] = [[1.0, 0.0], [0.0, 0.0]]
    with pytest.raises(ModelValidationError) as exc:
        model_from_dict(doc)
    assert any("R[0] not positive definite" in v for v in exc.value.violations)


def test_zero_state_weight_allowed(doc):
    doc["Q"] = [[0.0, 0.0], [0.0, 0.0]]
    model, _ = model_from_dict(doc)
    assert np.all(model.q_weight == 0)


def test_zero_horizon_is_schema_error(doc):
    doc["horizon"] = 0
    with pytest.raises(ModelSchemaError):
        model_from_dict(doc)


def test_missing_field_is_schema_error(doc):
    del doc["sigma_f"]
    with pytest.raises(ModelSchemaError, match="sigma_f"):
        model_from_dict(doc)


def test_missing_bias_defaults_to_zero(doc):
    del doc["bias"]
    model, _ = model_from_dict(doc)
    assert model.bias.shape == (6, 2) and np.all(model.bias == 0)


def test_no_chance_constraints_means_empty_set(doc):
    del doc["chance_constraints"]
    _, cc = model_from_dict(doc)
    assert cc.is_empty


def test_shape_mismatch_reported(doc):
    doc["modes"][0]["B"] = [[1.0], [2.0]]
    with pytest.raises(ModelValidationError, match=r"B\[0\]\[0\]"):
        model_from_dict(doc)


def test_small_asymmetry_symmetrized_large_rejected(doc):
    d = copy.deepcopy(doc)
    d["sigma0"] = [[6.0, 1e-10], [0.0, 6.0]]
    model, _ = model_from_dict(d)
    assert np.array_equal(model.sigma0, model.sigma0.T)
    doc["sigma0"] = [[6.0, 1e-3], [0.0, 6.0]]
    with pytest.raises(ModelValidationError, match="sigma0 asymmetric"):
        model_from_dict(doc)


def test_unreachable_mode_rejected(doc):
    doc["transition"] = [[1.0, 0.0], [1.0, 0.0]]
    with pytest.raises(ModelValidationError, match="below"):
        model_from_dict(doc)


def test_time_varying_modes(doc):
    doc["modes"] = [copy.deepcopy(doc["modes"]) for _ in range(doc["horizon"])]
    doc["modes"][3][1]["A"] = [[0.0, 0.0], [0.0, 0.0]]
    model, _ = model_from_dict(doc)
    assert not model.time_invariant
    assert np.all(model.a[3, 1] == 0) and np.any(model.a[2, 1] != 0)


def test_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ModelParseError):
        load_model(p)


def test_file_round_trip(tmp_path, benchmark):
    model, cc = benchmark
    p = tmp_path / "m.json"
    save_model(model, p, cc)
    again, cc2 = load_model(p)
    assert validate(again, cc2).ok
    assert models_equal(model, again, atol=1e-15)
    assert cc2.state_halfplanes[0].offset == -10.0
    np.testing.assert_array_equal(cc2.control_norm.u_max, [8.0, 8.0])


def test_packaged_data_files_load():
    from importlib import resources
    for name in ("two_mode_benchmark.json", "two_mode_unconstrained.json"):
        with resources.as_file(resources.files("covsteer") / "data" / name) as p:
            model, cc = load_model(p)
        assert model.horizon == 6 and model.num_modes == 2
        assert cc.is_empty == (name == "two_mode_unconstrained.json")


def test_cc_risk_out_of_range(benchmark):
    model, cc = benchmark
    from dataclasses import replace
    bad = replace(cc, state_risk=0.7)
    assert any("state risk" in v for v in validate(model, bad).violations)


# ---------------------------------------------------------------- properties

@st.composite
def random_models(draw):
    n_x = draw(st.integers(1, 3))
    n_u = draw(st.integers(1, 2))
    N = draw(st.integers(1, 3))
    T = draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    P = rng.uniform(0.05, 1.0, (N, N))
    P /= P.sum(axis=1, keepdims=True)
    rho0 = rng.uniform(0.1, 1.0, N)
    rho0 /= rho0.sum()
    modes = [ModeDynamics(rng.normal(size=(n_x, n_x)), rng.normal(size=(n_x, n_u)),
                          rng.normal(size=(n_x, n_x))) for _ in range(N)]
    c = rng.normal(size=(n_x, n_x))
    return MjlsModel.from_modes(
        modes, MarkovChain(P, rho0), T, q_weight=c @ c.T, r_weight=np.eye(n_u) * 2.0,
        mu0=rng.normal(size=n_x), sigma0=np.eye(n_x), mu_f=rng.normal(size=n_x),
        sigma_f=2 * np.eye(n_x), bias=rng.normal(size=n_x))


@settings(max_examples=40, deadline=None)
@given(random_models())
def test_serialization_round_trip_property(model):
    text = json.dumps(model_to_dict(model, ChanceConstraintSet()))
    again, cc = model_from_dict(json.loads(text))
    assert cc.is_empty
    assert models_equal(model, again, atol=1e-15)
