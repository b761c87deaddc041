import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from escot.runjump import EscotConfig, as_step_answers, process_trajectory
from escot.theory import (
    DynamicsSchedule,
    EnumerationTooLarge,
    batch_stop,
    dynamics_curves,
    event_bound,
    exact_small_enumeration,
    monte_carlo_error,
    prop1_bound,
    sample_trajectories,
    sample_trajectory,
    stop_event,
    theorem1_bound,
)
from oracles import runs_from_scratch, stop_from_scratch

# -- bounds ------------------------------------------------------------------


def test_theorem1_values():
    assert theorem1_bound(0.8, 5, 2) == pytest.approx(1 - 1 / (0.25 ** 3 + 1), abs=1e-15)
    assert theorem1_bound(0.8, 5, 2) == pytest.approx(0.015385, abs=5e-7)
    for r_stop, r_prev in [(3, 1), (9, 3), (1, 7)]:
        assert theorem1_bound(0.5, r_stop, r_prev) == 0.5


def test_prop1_value():
    want = 1 - 1 / (1 + 0.2 ** 3 + (0.25 * 0.5) ** 3)
    assert prop1_bound(0.8, 5, 2, 3) == pytest.approx(want, abs=1e-15)
    # the published value 0.009856 is the formula rounded up at the sixth decimal
    assert prop1_bound(0.8, 5, 2, 3) == pytest.approx(0.009856, abs=1e-6)


def test_bound_domain_errors():
    for p in (0.0, 1.0):
        with pytest.raises(ValueError):
            theorem1_bound(p, 3, 1)
        with pytest.raises(ValueError):
            prop1_bound(p, 3, 1, 4)
    with pytest.raises(ValueError):
        prop1_bound(0.7, 3, 1, 2)
    with pytest.raises(ValueError):
        theorem1_bound(0.7, 0, 1)


def test_event_bound_limits_and_dispatch():
    assert event_bound(1.0, 3, 1, 2) == 0.0
    assert event_bound(0.0, 3, 1, 5) == 1.0
    assert event_bound(0.7, 6, 2, 2) == theorem1_bound(0.7, 6, 2)
    assert event_bound(0.7, 6, 2, 4) == prop1_bound(0.7, 6, 2, 4)


def test_bounds_vanish_for_large_jumps():
    assert theorem1_bound(0.6, 2000, 1) < 1e-300
    assert prop1_bound(0.6, 500, 1, 5) < 1e-12
    assert theorem1_bound(0.3, 2000, 1) == 1.0


def test_bounds_strictly_decrease_on_grid():
    ps = [0.55, 0.6, 0.7, 0.8, 0.9, 0.95]
    for r_prev in (1, 2, 4):
        for p in ps:
            t1 = [theorem1_bound(p, r_prev + j, r_prev) for j in range(1, 12)]
            assert all(a > b for a, b in zip(t1, t1[1:]))
            for space in (3, 5, 10):
                pr = [prop1_bound(p, r_prev + j, r_prev, space) for j in range(1, 12)]
                assert all(a > b for a, b in zip(pr, pr[1:]))
        for j in (1, 3, 6):
            t1 = [theorem1_bound(p, r_prev + j, r_prev) for p in ps]
            assert all(a > b for a, b in zip(t1, t1[1:]))
            for space in (3, 5, 10):
                pr = [prop1_bound(p, r_prev + j, r_prev, space) for p in ps]
                assert all(a > b for a, b in zip(pr, pr[1:]))


def test_prop1_shrinks_as_answer_space_grows():
    vals = [prop1_bound(0.7, 6, 2, space) for space in (3, 5, 10, 100, 10_000)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-9


@given(st.floats(0.01, 0.99), st.integers(1, 40), st.integers(1, 40), st.integers(3, 50))
def test_bounds_are_probabilities(p, r_stop, r_prev, space):
    for b in (theorem1_bound(p, r_stop, r_prev), prop1_bound(p, r_stop, r_prev, space)):
        assert 0.0 <= b <= 1.0


# -- schedules and sampling -----------------------------------------------------


def test_schedules_clamp_final_step():
    for s in (DynamicsSchedule.linear(2, 7), DynamicsSchedule.logistic(3, 9, 4),
              DynamicsSchedule.step(5, 8, 4), DynamicsSchedule.constant(2, 5, 0.4)):
        assert s.probs[-1] == 1.0 and s.violations() == []
    lin = DynamicsSchedule.linear(2, 4)
    assert [lin(t) for t in range(1, 5)] == [0.25, 0.5, 0.75, 1.0]


def test_violations_detected():
    bumpy = DynamicsSchedule(2, (0.2, 0.9, 0.4, 1.0), "bumpy")
    assert any("decreases" in v for v in bumpy.violations())
    assert DynamicsSchedule.constant(2, 3, 0.5).violations() == []
    loose = DynamicsSchedule.from_function(2, 3, lambda t: 0.5, clamp_final=False)
    assert any("not 1" in v for v in loose.violations())
    with pytest.raises(ValueError):
        DynamicsSchedule(1, (1.0,))
    with pytest.raises(ValueError):
        DynamicsSchedule(2, (1.5,))


def test_degenerate_schedule_samples_all_correct():
    s = DynamicsSchedule.constant(2, 3, 1.0)
    for seed in range(20):
        assert sample_trajectory(s, seed) == [1, 1, 1]


def test_sampling_is_deterministic():
    s = DynamicsSchedule.logistic(5, 30, 10)
    assert sample_trajectory(s, 7) == sample_trajectory(s, 7)
    a = sample_trajectories(s, 5000, 3)
    b = sample_trajectories(s, 5000, 3)
    assert np.array_equal(a, b)
    assert a.min() >= 1 and a.max() <= 5


def test_linear_schedule_late_bucket_frequency():
    s = DynamicsSchedule.linear(2, 1000)
    X = sample_trajectories(s, 10_000, 0)
    late = X[:, 900:]  # steps 901..1000
    assert (late == 1).mean() == pytest.approx(0.95, abs=0.02)


def test_marginals_within_three_sigma():
    s = DynamicsSchedule.logistic(4, 12, midpoint=5, steepness=0.5)
    n = 20_000
    X = sample_trajectories(s, n, 1)
    for t in range(1, 13):
        p = s(t)
        freq = (X[:, t - 1] == 1).mean()
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(freq - p) <= 3 * sigma + 1e-12
    wrong = X[X != 1]
    counts = np.bincount(wrong, minlength=5)[2:]
    assert counts.min() / counts.max() > 0.95  # wrong answers are uniform


# -- vectorized stopping ---------------------------------------------------------


@pytest.mark.parametrize("cfg", [
    EscotConfig(d_min=1, alpha=0.5), EscotConfig(d_min=2, alpha=0.05),
    EscotConfig(d_min=3, alpha=0.2), EscotConfig(d_min=5, alpha=0.05, min_prior_diffs=3),
])
def test_batch_stop_matches_scalar(cfg):
    s = DynamicsSchedule.logistic(3, 40, midpoint=15)
    X = sample_trajectories(s, 1500, 9)
    got = batch_stop(X, cfg)
    for row, step, ans, rs, rp in zip(X, got.stop_step, got.stop_answer, got.r_stop, got.r_prev):
        res = process_trajectory(as_step_answers(row.tolist()), cfg)
        if res.stopped:
            assert (step, ans) == (res.stop_step, res.stopped_answer)
            assert (rs, rp) == res.state.runs[-1:-3:-1]
        else:
            assert step == -1


def test_batch_stop_on_all_binary_sequences():
    X = np.array(list(itertools.product([1, 2], repeat=10)))
    for cfg in (EscotConfig(d_min=1, alpha=0.5), EscotConfig(d_min=2, alpha=0.2)):
        got = batch_stop(X, cfg).stop_step.tolist()
        want = [stop_from_scratch(list(r), cfg.d_min, cfg.alpha)[0] or -1 for r in X.tolist()]
        assert got == want


def test_batch_stop_empty():
    assert batch_stop(np.zeros((0, 5), dtype=int), EscotConfig()).stop_step.size == 0


def test_stop_event_fields():
    s = DynamicsSchedule.linear(2, 20)
    ev = stop_event([1, 1, 2, 1, 6], "1", s)
    assert (ev.k, ev.q, ev.r_prev, ev.r_stop) == (5, 5, 1, 6)
    assert ev.p_q1 == s(6) and ev.stopped_correct and ev.stop_step == 11
    assert ev.bound == theorem1_bound(s(6), 6, 1)


# -- Monte Carlo ---------------------------------------------------------------


def test_monte_carlo_error_zero_without_wrong_answers():
    res = monte_carlo_error(DynamicsSchedule.constant(3, 30, 1.0), EscotConfig(d_min=2), 500)
    assert res.empirical_error == 0.0 and res.n_stopped == 0
    res = monte_carlo_error(DynamicsSchedule.step(3, 30, 10, low=0.2, high=1.0), EscotConfig(d_min=3), 3000)
    assert res.n_stopped > 0
    assert all(e.q + 1 < 10 or e.stopped_correct for e in res.events)


def test_monte_carlo_parallel_matches_serial():
    s = DynamicsSchedule.logistic(2, 40, 15)
    cfg = EscotConfig(d_min=3, alpha=0.2)
    a = monte_carlo_error(s, cfg, 10_000, rng_seed=5, n_jobs=1)
    b = monte_carlo_error(s, cfg, 10_000, rng_seed=5, n_jobs=4)
    assert (a.empirical_error, a.mean_bound, a.n_stopped, a.margin) == (b.empirical_error, b.mean_bound, b.n_stopped, b.margin)


def test_monte_carlo_agrees_with_exact():
    s = DynamicsSchedule.linear(2, 10)
    cfg = EscotConfig(d_min=1, alpha=0.5)
    exact = exact_small_enumeration(s, cfg)
    mc = monte_carlo_error(s, cfg, 200_000, rng_seed=2)
    assert mc.stop_rate == pytest.approx(exact.stop_probability, abs=0.005)
    assert mc.empirical_error == pytest.approx(exact.exact_error, abs=0.01)
    assert mc.mean_bound == pytest.approx(exact.exact_mean_bound, abs=0.01)


def test_monte_carlo_rejects_zero_trials():
    with pytest.raises(ValueError):
        monte_carlo_error(DynamicsSchedule.linear(2, 5), EscotConfig(), 0)


# -- exact enumeration ---------------------------------------------------------


def _exact_oracle(schedule, cfg):
    """Enumerate with the from-scratch stop rule and the closed-form bound."""
    p = schedule.probs
    stop = err = bound = 0.0
    for seq in itertools.product([1, 2], repeat=len(p)):
        prob = math.prod(p[t] if x == 1 else 1 - p[t] for t, x in enumerate(seq))
        if prob == 0:
            continue
        step, _ = stop_from_scratch(list(seq), cfg.d_min, cfg.alpha)
        if step is None:
            continue
        runs = runs_from_scratch(seq[:step])
        q = sum(runs[:-1])
        pq = p[q]
        jump = runs[-1] - runs[-2]
        b = 0.0 if pq == 1 else 1 - 1 / (((1 - pq) / pq) ** jump + 1)
        stop += prob
        bound += prob * b
        if seq[step - 1] != 1:
            err += prob
    return err / stop, bound / stop, stop


def test_exact_matches_independent_enumeration():
    s = DynamicsSchedule.linear(2, 6)
    cfg = EscotConfig(d_min=1, alpha=0.5)
    got = exact_small_enumeration(s, cfg)
    err, bound, stop = _exact_oracle(s, cfg)
    assert got.exact_error == pytest.approx(err, abs=1e-12)
    assert got.exact_mean_bound == pytest.approx(bound, abs=1e-12)
    assert got.stop_probability == pytest.approx(stop, abs=1e-12)
    assert got.holds


def test_exact_trivial_cases():
    assert exact_small_enumeration(DynamicsSchedule.constant(2, 8, 1.0), EscotConfig(d_min=1)).exact_error == 0.0
    one = exact_small_enumeration(DynamicsSchedule.constant(2, 1, 1.0), EscotConfig(d_min=1))
    assert one.stop_probability == 0.0 and one.exact_error == 0.0
    with pytest.raises(EnumerationTooLarge):
        exact_small_enumeration(DynamicsSchedule.linear(2, 21), EscotConfig())


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0.05, 0.95), min_size=5, max_size=7), st.sampled_from([1, 2]), st.sampled_from([0.05, 0.2, 0.5]))
def test_exact_bound_holds_for_random_monotone_schedules(ps, d_min, alpha):
    probs = tuple(sorted(ps)) + (1.0,)
    r = exact_small_enumeration(DynamicsSchedule(2, probs), EscotConfig(d_min=d_min, alpha=alpha))
    assert r.exact_error <= r.exact_mean_bound


# -- dynamics curves -------------------------------------------------------------


def test_all_equal_record_gives_uniform_density():
    c = dynamics_curves([["7"] * 20], bins=10)
    assert c.match_density == [1.0] * 10
    assert c.match_rate == [1.0] * 10


def test_fig1_run_curve(fig1_answers):
    c = dynamics_curves([fig1_answers], bins=6)
    xs, hs = zip(*c.run_points)
    assert xs == pytest.approx([i / 6 for i in range(1, 7)])
    assert hs == (1, 1, 1, 2, 3, 9)
    assert c.run_curve == [1, 1, 1, 2, 3, 9]


def test_last_bin_holds_final_tenth():
    rec = ["x"] * 9 + ["y"] * 11  # steps 19 and 20 are the last tenth
    c = dynamics_curves([rec], bins=10)
    assert c.match_rate[-1] == 1.0 and c.match_rate[0] == 0.0
    assert sum(c.match_density) / 10 == pytest.approx(1.0)


def test_monotone_schedule_gives_rising_density():
    s = DynamicsSchedule.linear(4, 50)
    seqs = sample_trajectories(s, 4000, 4).tolist()
    c = dynamics_curves(seqs, bins=10)
    assert all(b >= a - 0.02 for a, b in zip(c.match_density, c.match_density[1:]))
    assert c.match_rate[-1] > 0.9 > 0.2 > c.match_rate[0]


def test_dynamics_skips_empty_and_honours_finals():
    c = dynamics_curves([[], ["a", "b"]], bins=2, finals=[None, "a"])
    assert c.match_rate == [1.0, 0.0]
    with pytest.raises(ValueError):
        dynamics_curves([["a"]], bins=0)
