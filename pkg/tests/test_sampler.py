import numpy as np
import pytest

from services.channel import ConstantObservable, QuadraticObservable
from services.errors import BudgetExceeded, DegenerateTransition, PreconditionError
from services.instrument import Instrument
from services.projective import ProjectivePoint, basis_point
from services.rng import stream
from services.sampler import (
    RunConfig,
    TrajectoryState,
    enumerate_branches,
    enumerate_exact,
    lyapunov_estimate,
    op_norm_log,
    run,
    stationarity_check,
    step,
)

X0 = ProjectivePoint(np.array([0.6, 0.8j]))


def test_step_amplitude_damping_stays_at_ground(ad, rng):
    state = TrajectoryState.start(basis_point(2, 0))
    for _ in range(20):
        state = step(ad, state, rng)
    assert state.point == basis_point(2, 0)
    assert state.log_norm == 0.0


def test_step_unitary_keeps_norm(uni, rng):
    state = TrajectoryState.start(X0, track_product=True)
    for _ in range(50):
        state = step(uni, state, rng)
    assert abs(state.log_norm) < 1e-12
    assert abs(state.log_op_norm()) < 1e-12


def test_step_permuted_dephasing_swaps(pndm, rng):
    state = step(pndm, TrajectoryState.start(basis_point(2, 0)), rng)
    assert state.point == basis_point(2, 1)


def test_step_degenerate_state(rng):
    ins = Instrument(weights=[1.0], matrices=np.diag([1.0, 0.0]))
    with pytest.raises(DegenerateTransition):
        step(ins, TrajectoryState.start(basis_point(2, 1)), rng)


def test_step_rejects_unstochastic_instrument(rng):
    ins = Instrument(weights=[1.0], matrices=2 * np.eye(2))
    with pytest.raises(PreconditionError):
        step(ins, TrajectoryState.start(basis_point(2, 0)), rng)


def test_run_constant_observable(dr):
    stats = run(dr, RunConfig(n_steps=50, n_traj=20, seed=4, observable=ConstantObservable(1.0)))
    assert np.all(stats.sum_h / 50 == 1.0)


def test_run_is_reproducible(dr):
    cfg = RunConfig(n_steps=40, n_traj=30, seed=11, track_product=True, checkpoints=[10, 40],
                    observable=QuadraticObservable(np.diag([1.0, -1.0])))
    a, b = run(dr, cfg), run(dr, cfg)
    for name in ("sum_h", "log_norm", "terminal_points", "log_op_norm", "checkpoint_sum_h", "occupation_points"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_run_independent_of_blocks_and_threads(monkeypatch, pndm):
    from app.config import settings

    cfg = RunConfig(n_steps=30, n_traj=25, seed=3, threads=1)
    reference = run(pndm, cfg)
    monkeypatch.setattr(settings, "block_size", 4)
    monkeypatch.setattr(settings, "step_block", 7)
    split = run(pndm, cfg.model_copy(update={"threads": 3}))
    assert np.array_equal(reference.log_norm, split.log_norm)
    assert np.array_equal(reference.terminal_points, split.terminal_points)
    assert np.array_equal(reference.occupation_points, split.occupation_points)


def test_run_seed_changes_values(pndm):
    a = run(pndm, RunConfig(n_steps=20, n_traj=10, seed=1))
    b = run(pndm, RunConfig(n_steps=20, n_traj=10, seed=2))
    assert not np.array_equal(a.log_norm, b.log_norm)


def test_checkpoints_match_terminal_values(dr):
    h = QuadraticObservable(np.diag([1.0, -1.0]))
    stats = run(dr, RunConfig(n_steps=25, n_traj=10, seed=8, checkpoints=[5, 25], observable=h))
    assert np.array_equal(stats.checkpoint(25), stats.sum_h)
    assert np.array_equal(stats.checkpoint(25, "log_norm"), stats.log_norm)
    with pytest.raises(PreconditionError):
        stats.checkpoint(7)


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(n_steps=10, n_traj=1, burn_in=10)
    with pytest.raises(ValueError):
        RunConfig(n_steps=10, n_traj=1, checkpoints=[11])
    with pytest.raises(ValueError):
        RunConfig(n_steps=10, n_traj=1, initial_kind="fixed")


def test_amplitude_damping_absorbs(ad):
    branches = enumerate_branches(ad, basis_point(2, 1), 10)
    at_ground = np.abs(branches.points[:, 0]) > 1 - 1e-12
    assert branches.prob[at_ground].sum() >= 1 - 0.64 ** 10 - 1e-12

    stats = run(ad, RunConfig.from_point(basis_point(2, 1), n_steps=200, n_traj=50, seed=9, burn_in=100))
    mass = np.mean(np.abs(stats.occupation_points[:, 0]) > 1 - 1e-12)
    assert mass > 0.95


def test_enumeration_probabilities(ad, uni):
    outcomes = enumerate_exact(ad, X0, 10)
    assert sum(o.prob for o in outcomes) == pytest.approx(1.0, abs=1e-10)
    outcomes = enumerate_exact(uni, X0, 6)
    assert len(outcomes) == 1 and outcomes[0].prob == pytest.approx(1.0)


def test_enumeration_budget(monkeypatch, ad):
    from app.config import settings

    monkeypatch.setattr(settings, "enumeration_budget", 10)
    with pytest.raises(BudgetExceeded):
        enumerate_exact(ad, X0, 4)


def test_enumeration_matches_simulation(pndm):
    h = QuadraticObservable(np.diag([-1.0, 1.0]))
    exact = enumerate_branches(pndm, X0, 8, h)
    stats = run(pndm, RunConfig.from_point(X0, n_steps=8, n_traj=4000, seed=21, observable=h))
    stderr = np.std(stats.sum_h, ddof=1) / np.sqrt(stats.n_traj)
    assert abs(exact.expectation(exact.sum_h) - stats.sum_h.mean()) <= 3 * stderr


def test_lyapunov_examples(uni, ad, pndm):
    gamma, _ = lyapunov_estimate(uni, RunConfig(n_steps=100, n_traj=10, seed=1))
    assert abs(gamma) < 1e-12
    gamma, stderr = lyapunov_estimate(ad, RunConfig.from_point(basis_point(2, 0), n_steps=100, n_traj=10, seed=1))
    assert gamma == 0.0 and stderr == 0.0

    exact = enumerate_branches(pndm, X0, 12)
    gamma, stderr = lyapunov_estimate(pndm, RunConfig.from_point(X0, n_steps=12, n_traj=4000, seed=5))
    assert abs(gamma - exact.expectation(exact.log_norm) / 12) <= 3 * stderr


def test_lyapunov_needs_long_run(dr):
    with pytest.raises(PreconditionError):
        lyapunov_estimate(dr, RunConfig(n_steps=50, n_traj=2, burn_in=10))


def test_op_norm_dominates_vector_norm(dr):
    cfg = RunConfig(n_steps=300, n_traj=50, seed=2, track_product=True)
    stats = run(dr, cfg)
    assert np.all(op_norm_log(dr, cfg, stats) >= stats.log_norm - 1e-10)
    with pytest.raises(PreconditionError):
        op_norm_log(dr, cfg.model_copy(update={"track_product": False}), stats)


def test_occupation_sample_is_stationary(dr):
    stats = run(dr, RunConfig(n_steps=2000, n_traj=50, seed=6, burn_in=200))
    result = stationarity_check(dr, stats.occupation_points, 20000, seed=7,
                                h=QuadraticObservable(np.diag([1.0, -1.0])))
    assert result["pass"]


def test_stream_is_keyed():
    a = stream(1, 0, 5).random(4)
    assert np.array_equal(a, stream(1, 0, 5).random(4))
    assert not np.array_equal(a, stream(1, 0, 6).random(4))


def test_centered_observable_averages_to_zero(dr):
    h = QuadraticObservable(np.diag([1.0, -1.0]))
    warm = run(dr, RunConfig(n_steps=1200, n_traj=200, seed=21, burn_in=200))
    labels, inverse = np.unique(warm.occupation_traj, return_inverse=True)
    per_traj = np.bincount(inverse, h(warm.occupation_points)) / np.bincount(inverse)
    centre = float(per_traj.mean())
    centre_err = float(per_traj.std(ddof=1) / np.sqrt(labels.size))

    cfg = RunConfig(n_steps=1200, n_traj=200, seed=22, burn_in=200, observable=h.centered(centre),
                    record_occupation=False)
    stats = run(dr, cfg)
    averages = (stats.sum_h - stats.burn_sum_h) / (cfg.n_steps - cfg.burn_in)
    err = float(averages.std(ddof=1) / np.sqrt(cfg.n_traj))
    assert abs(averages.mean()) <= 3 * np.hypot(err, centre_err)
