import math

import numpy as np
import pytest

from opal.env_tasks import Environment, build_task, make_environment, make_function
from opal.operators import (
    REGISTRY,
    TOKENS,
    OperatorCall,
    OperatorProgram,
    PopulationState,
    apply_operator,
    de_baseline,
    de_mutation_rand1,
    design_phase,
    execute_program,
    inertia_weight,
    pso_baseline,
    uniform_population,
)

GREEDY = [t for t, spec in REGISTRY.items() if spec.greedy]


def sphere_env(d=10, budget=10**7, seed=0):
    return Environment(make_function("sphere", d), np.full(d, -100.0), np.full(d, 100.0),
                       budget, seed=seed)


def random_state(env, P=50, seed=0):
    X = uniform_population(env, P, np.random.default_rng(seed))
    return PopulationState(X, env.evaluate_batch(X, allow_overshoot=True))


def test_greedy_subset_matches_selection_semantics():
    assert set(GREEDY) == {"de_rand_1_bin", "de_best_1_bin", "uniform_crossover_pairs",
                           "gaussian_mutation_self", "gaussian_mutation_best",
                           "local_search_best_axis"}
    assert len(TOKENS) == 8


def test_rand1_mutation_examples():
    np.testing.assert_allclose(de_mutation_rand1([0, 0], [1, 0], [0, 1], 0.5), [0.5, -0.5])
    x1, x2, x3 = np.array([1.0, 2.0]), np.array([3.0, -1.0]), np.array([0.5, 0.5])
    np.testing.assert_array_equal(de_mutation_rand1(x1, x2, x3, 0.0), x1)
    np.testing.assert_array_equal(de_mutation_rand1(x1, x2, x2, 0.9), x1)


def test_restart_cost_is_ceil_fraction_of_population():
    env = sphere_env()
    _, cost = apply_operator("restart_worst_fraction", {"q_restart": 0.2}, random_state(env),
                             env, np.random.default_rng(0))
    assert cost == 10


def test_local_search_cost_is_two_d():
    env = sphere_env(d=10)
    _, cost = apply_operator("local_search_best_axis", {}, random_state(env), env,
                             np.random.default_rng(0))
    assert cost == 20


def test_local_search_cost_is_capped_by_remaining_budget():
    env = sphere_env(d=10, budget=57)
    state = random_state(env)
    _, cost = apply_operator("local_search_best_axis", {}, state, env, np.random.default_rng(0))
    assert cost == 7 and env.remaining == 0


@pytest.mark.parametrize("token", TOKENS)
def test_operator_keeps_state_consistent_and_in_bounds(token):
    env = sphere_env(d=5)
    state = random_state(env, seed=4)
    before = env.evals_used
    new, cost = apply_operator(token, {}, state, env, np.random.default_rng(1))
    assert env.evals_used - before == cost > 0
    np.testing.assert_array_equal(new.fitness, env.objective(new.X))
    assert np.all(new.X >= env.lower) and np.all(new.X <= env.upper)
    assert new.best_index == int(np.argmin(new.fitness))


@pytest.mark.parametrize("token", GREEDY)
def test_greedy_operators_never_worsen_the_best(token):
    env = sphere_env(d=5)
    rng = np.random.default_rng(11)
    for trial in range(100):
        state = random_state(env, P=20, seed=trial)
        new, _ = apply_operator(token, {}, state, env, rng)
        assert new.fitness.min() <= state.fitness.min()


def test_apply_operator_does_not_mutate_input_state():
    env = sphere_env()
    state = random_state(env)
    X0 = state.X.copy()
    apply_operator("pso_global_step", {}, state, env, np.random.default_rng(0))
    np.testing.assert_array_equal(state.X, X0)
    assert state.velocities is None


def test_unknown_token_and_hyperparameter_rejected():
    with pytest.raises(ValueError):
        OperatorCall("tabu_search")
    with pytest.raises(ValueError):
        OperatorCall("de_rand_1_bin", {"sigma": 0.1})


def test_program_text_round_trip():
    prog = OperatorProgram.from_tokens(["de_best_1_bin", "gaussian_mutation_best",
                                        "restart_worst_fraction"])
    again = OperatorProgram.from_text(prog.to_text())
    assert again.tokens == prog.tokens
    assert [c.theta for c in again.calls] == [c.theta for c in prog.calls]


def test_empty_program_returns_initial_best_only():
    env = sphere_env()
    state = random_state(env)
    trace = execute_program(env, state, OperatorProgram([]), 1000, seed=0)
    assert trace.H_best == [state.best_fitness] and trace.H_fe == [0]


def test_restart_program_overshoots_by_less_than_one_call():
    env = sphere_env()
    state = random_state(env)
    prog = OperatorProgram([OperatorCall("restart_worst_fraction", {"q_restart": 0.2})])
    trace = execute_program(env, state, prog, 25, seed=0)
    assert len(trace.H_fe) - 1 == 3
    assert trace.fe_used == 30


def test_trace_histories_are_monotone():
    env = sphere_env()
    prog = OperatorProgram.from_tokens(["pso_global_step", "restart_worst_fraction",
                                        "uniform_crossover_pairs"])
    trace = execute_program(env, random_state(env), prog, 2000, seed=3)
    assert np.all(np.diff(trace.H_best) <= 0)
    assert np.all(np.diff(trace.H_fe) > 0)


def test_execution_is_deterministic():
    def run():
        env = sphere_env(seed=0)
        prog = OperatorProgram.from_tokens(["de_rand_1_bin", "pso_global_step",
                                            "gaussian_mutation_self"])
        return execute_program(env, random_state(env, seed=9), prog, 3000, seed=42)

    a, b = run(), run()
    assert a.H_best == b.H_best and a.H_fe == b.H_fe
    np.testing.assert_array_equal(a.final_state.X, b.final_state.X)


def test_design_phase_split_and_best():
    spec = build_task("sphere", 10, seed=1, budget=10_000)
    env = make_environment(spec)
    T_design = math.floor(0.2 * spec.budget)
    state, f_best = design_phase(env, T_design=T_design, rng=0)
    assert T_design <= env.evals_used < T_design + 50
    _, f = env.trajectory_arrays()
    assert f_best == f.min()
    assert f_best < f[:50].min()
    assert len(state.fitness) == 50


def test_design_phase_rejects_budget_below_population():
    with pytest.raises(ValueError):
        design_phase(sphere_env(), T_design=10)


def test_inertia_schedule_endpoints():
    assert inertia_weight(0, 10_000) == pytest.approx(0.9)
    assert inertia_weight(10_000, 10_000) == pytest.approx(0.4)


@pytest.mark.parametrize("baseline", [de_baseline, pso_baseline])
def test_baseline_budget_law(baseline):
    env = sphere_env()
    trace = baseline(env, T=2345, seed=0)
    assert 2345 <= env.evals_used < 2345 + 50
    assert trace.fe_used == env.evals_used
    assert np.all(np.diff(trace.H_best) <= 0)


def test_pso_baseline_sanity_on_sphere():
    finals = [pso_baseline(sphere_env(seed=s), T=10_000, seed=s).final_best for s in range(20)]
    assert np.median(finals) < 1e-1


def test_de_baseline_is_deterministic():
    a = de_baseline(sphere_env(), T=1000, seed=5)
    b = de_baseline(sphere_env(), T=1000, seed=5)
    assert a.H_best == b.H_best
