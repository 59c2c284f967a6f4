import json

import numpy as np
import pytest

from services.channel import superoperator_matrix
from services.errors import InstrumentFormatError, ParameterRangeError, PreconditionError, UnknownInstrument
from services.instrument import (
    Instrument,
    builtin,
    instrument_catalog,
    instrument_from_spec,
    instrument_to_document,
    load,
    moment,
    parse_builtin_spec,
    save,
    transition_weights,
    validate,
)
from services.projective import ProjectivePoint, basis_point, haar_vectors


def test_validate_single_atoms():
    ok = validate(Instrument(weights=[1.0], matrices=np.eye(2)))
    assert ok.passed and ok.stochasticity_defect == pytest.approx(0.0)
    bad = validate(Instrument(weights=[1.0], matrices=2 * np.eye(2)), tol=1e-10)
    assert not bad.passed
    assert bad.stochasticity_defect == pytest.approx(3.0)


def reordered(ins: Instrument) -> Instrument:
    order = np.roll(np.arange(ins.n_atoms)[::-1], 1)
    return Instrument(weights=ins.weights[order], matrices=ins.matrices[order], label=ins.label)


def split_first(ins: Instrument) -> Instrument:
    weights = np.concatenate([[ins.weights[0] / 2, ins.weights[0] / 2], ins.weights[1:]])
    matrices = np.concatenate([ins.matrices[:1], ins.matrices])
    return Instrument(weights=weights, matrices=matrices, label=ins.label)


@pytest.mark.parametrize("spec", ["AD:p=0.36", "NDM:q=0.3", "PNDM:q=0.3", "DR:q=0.3,phi=1.0", "UNI", "PROJ:k=3"])
@pytest.mark.parametrize("scale", [1.0, 1.2])
@pytest.mark.parametrize("change", [reordered, split_first])
def test_validate_ignores_atom_order_and_splitting(spec, scale, change):
    base = instrument_from_spec(f"builtin:{spec}").instrument
    ins = Instrument(weights=scale * base.weights, matrices=base.matrices, label=base.label)
    other = change(ins)
    first, second = validate(ins, tol=1e-9), validate(other, tol=1e-9)
    assert first.passed == second.passed == (scale == 1.0)
    assert second.stochasticity_defect == pytest.approx(first.stochasticity_defect, abs=1e-13)
    for adjoint in (False, True):
        assert np.allclose(superoperator_matrix(ins, adjoint).matrix, superoperator_matrix(other, adjoint).matrix,
                           atol=1e-13)


def test_validate_needs_positive_tolerance(ad):
    with pytest.raises(PreconditionError):
        validate(ad, tol=0.0)


def test_builtins_are_stochastic(all_builtins):
    for ins in all_builtins:
        assert validate(ins).stochasticity_defect < 1e-12, ins.label


def test_transition_weights_examples(ad, uni, rng):
    x = ProjectivePoint(haar_vectors(2, 1, rng)[0])
    assert np.allclose(transition_weights(uni, x), [1.0])
    assert np.allclose(transition_weights(ad, basis_point(2, 0)), [1.0, 0.0])
    assert np.allclose(transition_weights(ad, basis_point(2, 1)), [0.64, 0.36])


def test_transition_weights_sum_to_one(all_builtins, rng):
    X = haar_vectors(2, 200, rng)
    for ins in all_builtins:
        assert np.allclose(transition_weights(ins, X).sum(axis=1), 1.0)


def test_save_load_round_trip(ad, tmp_path):
    path = tmp_path / "ad.json"
    save(ad, path)
    loaded = load(path)
    assert loaded.instrument == ad
    assert loaded.report.passed


def test_load_dim_mismatch(tmp_path):
    doc = {"label": "bad", "dim": 3, "atoms": [{"weight": 1.0, "matrix": [[[1, 0], [0, 0]], [[0, 0], [1, 0]]]}]}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(InstrumentFormatError) as info:
        load(path)
    assert "atoms.0.matrix" in str(info.value)


def test_load_negative_weight(ad, tmp_path):
    doc = instrument_to_document(ad)
    doc["atoms"][1]["weight"] = -1.0
    path = tmp_path / "neg.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(InstrumentFormatError) as info:
        load(path)
    assert "weight" in str(info.value)


def test_load_malformed_json_reports_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"label": "x",\n "dim": 2,\n "atoms": [}')
    with pytest.raises(InstrumentFormatError) as info:
        load(path)
    assert "line 3" in str(info.value)


def test_load_keeps_unstochastic_instrument(tmp_path):
    doc = {"label": "big", "dim": 1, "atoms": [{"weight": 1.0, "matrix": [[[2, 0]]]}]}
    path = tmp_path / "big.json"
    path.write_text(json.dumps(doc))
    loaded = load(path)
    assert not loaded.report.passed
    assert loaded.report.stochasticity_defect == pytest.approx(3.0)


def test_catalog_names_and_errors():
    assert set(instrument_catalog.names()) == {"UNI", "AD", "NDM", "PNDM", "DR", "PROJ"}
    with pytest.raises(UnknownInstrument):
        builtin("NOPE")
    with pytest.raises(ParameterRangeError):
        builtin("AD", p=1.5)
    with pytest.raises(ParameterRangeError):
        builtin("UNI", unitary=np.array([[1.0, 1.0], [0.0, 1.0]]))


def test_builtin_spec_strings():
    assert parse_builtin_spec("builtin:DR:q=0.3,phi=1.0") == ("DR", {"q": 0.3, "phi": 1.0})
    loaded = instrument_from_spec("builtin:AD:p=0.36")
    assert loaded.instrument == builtin("AD", p=0.36)
    with pytest.raises(InstrumentFormatError):
        parse_builtin_spec("builtin:AD:p")


def test_moment_of_unitary_is_one(uni):
    assert moment(uni, 1.0) == pytest.approx(1.0)
    assert moment(uni, -1.0) == pytest.approx(1.0)
