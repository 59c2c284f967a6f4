import numpy as np
import pytest

from services.errors import BudgetExceeded, PreconditionError
from services.purification import GSeries, g_exact, g_mc, g_series, pur_diagnostic, pur_necessary_check


def test_g_exact_unitary_is_one(uni):
    for n in range(1, 6):
        assert g_exact(uni, n) == pytest.approx(1.0, abs=1e-12)


def test_g_exact_amplitude_damping_closed_form(ad):
    for n in range(1, 13):
        assert abs(g_exact(ad, n) - 0.8 ** n) < 1e-12


def test_g_exact_rank_one_atoms_vanish(proj):
    assert g_exact(proj, 1) == 0.0
    assert g_exact(proj, 4) == 0.0


def test_g_is_submultiplicative(all_builtins):
    for ins in all_builtins:
        g = {n: g_exact(ins, n) for n in range(1, 8)}
        for m in range(1, 8):
            for n in range(1, 8 - m + 1):
                assert g[m + n] <= g[m] * g[n] + 1e-10, ins.label


def test_g_exact_threads_agree(pndm):
    assert g_exact(pndm, 8, threads=2) == pytest.approx(g_exact(pndm, 8, threads=1), rel=1e-12)


def test_g_exact_budget(monkeypatch, ad):
    from app.config import settings

    monkeypatch.setattr(settings, "g_exact_budget", 100)
    with pytest.raises(BudgetExceeded):
        g_exact(ad, 7)


def test_g_mc_amplitude_damping(ad):
    estimate, stderr = g_mc(ad, 10, 10_000, seed=1)
    assert abs(estimate - 0.8 ** 10) <= 3 * stderr + 1e-12


def test_g_mc_unitary_has_zero_variance(uni):
    estimate, stderr = g_mc(uni, 5, 500, seed=3)
    assert estimate == pytest.approx(1.0, abs=1e-10)
    assert stderr < 1e-8


def test_g_mc_agrees_with_exact(pndm):
    estimate, stderr = g_mc(pndm, 6, 20_000, seed=7)
    assert abs(estimate - g_exact(pndm, 6)) <= 3 * stderr + 1e-12


def test_g_mc_reproducible_and_thread_independent(pndm):
    assert g_mc(pndm, 4, 9000, seed=5, threads=1) == g_mc(pndm, 4, 9000, seed=5, threads=3)


def test_g_mc_needs_samples(ad):
    with pytest.raises(PreconditionError):
        g_mc(ad, 3, 50, seed=0)


def test_pur_diagnostic_examples(ad, uni, pndm):
    result = pur_diagnostic(g_series(ad, 12))
    assert result["decaying"]
    assert result["lambda_hat"] == pytest.approx(0.8, abs=0.01)

    result = pur_diagnostic(g_series(uni, 12))
    assert not result["decaying"]
    assert result["lambda_hat"] == pytest.approx(1.0, abs=1e-8)

    assert pur_diagnostic(g_series(pndm, 12))["decaying"]


def test_pur_diagnostic_needs_six_values():
    with pytest.raises(PreconditionError):
        pur_diagnostic(GSeries(n=[1, 2, 3], values=[0.5, 0.25, 0.125]))


def test_pur_diagnostic_zero_series(proj):
    series = g_series(proj, 6)
    assert pur_diagnostic(series) == {"decaying": True, "lambda_hat": 0.0, "stderr": 0.0}
    assert series.decaying


def test_pur_necessary_check_examples(uni, ad, proj):
    verdict = pur_necessary_check(uni)
    assert verdict["verdict"] == "fails" and verdict["witness"] == "Id"
    verdict = pur_necessary_check(ad)
    assert verdict["verdict"] == "holds" and verdict["heuristic"]
    assert pur_necessary_check(proj)["verdict"] == "holds"


def test_g_series_falls_back_to_mc(monkeypatch, ad):
    from app.config import settings

    monkeypatch.setattr(settings, "g_exact_budget", 2 ** 6)
    series = g_series(ad, 8, mc_samples=4000, seed=2)
    assert series.method == "mixed"
    assert series.stderr[0] == 0.0 and series.stderr[-1] > 0.0
    assert np.allclose(series.values[:6], [0.8 ** n for n in range(1, 7)])
