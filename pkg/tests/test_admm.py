import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from patternprune import admm, oracles
from patternprune.autodiff import grad_check
from patternprune.errors import ConfigError, DimensionError, NumericError
from patternprune.pattern import ProjectionMode, SparsityConfig, build_pattern_pool, pattern_prune
from patternprune.verify import quadratic_admm

POOL = SparsityConfig(p=4, keep_k=8, pool_size=32)
TOPK = SparsityConfig(p=4, keep_k=8, mode=ProjectionMode.TOPK)


def test_init_state(rng):
    w = rng.standard_normal((8, 8))
    st_ = admm.init_state("w", w, POOL, rho=0.01)
    assert np.array_equal(st_.Z, np.zeros((8, 8))) and np.array_equal(st_.U, np.zeros((8, 8)))
    assert st_.iteration == 0 and st_.rho == 0.01
    other = admm.init_state("w", w, POOL, rho=0.01)
    assert np.array_equal(other.Z, st_.Z) and np.array_equal(other.U, st_.U)
    for bad in (-1.0, 0.0):
        with pytest.raises(ConfigError):
            admm.init_state("w", w, POOL, rho=bad)


def test_is_feasible_examples(rng):
    m = rng.standard_normal((8, 8))
    assert admm.is_feasible(pattern_prune(m, POOL)[0], POOL)
    assert not admm.is_feasible(m, POOL)
    assert admm.is_feasible(np.zeros((8, 8)), POOL)


def test_is_feasible_respects_given_pool(rng):
    cfg = SparsityConfig(p=2, keep_k=2, pool_size=1)
    m = rng.standard_normal((4, 4))
    pruned, _ = pattern_prune(m, cfg)
    pool = build_pattern_pool(m, cfg)
    assert admm.is_feasible(pruned, cfg, pool)
    other = np.zeros((4, 4))
    other[0, 0] = other[1, 1] = 1.0
    other[0, 2] = other[0, 3] = 1.0
    # two distinct supports never fit a one-mask pool
    assert not admm.is_feasible(other, cfg)


def test_is_feasible_counts_pool_budget():
    cfg = SparsityConfig(p=2, keep_k=2, pool_size=2)
    blocks = [np.array([[1, 1], [0, 0]]), np.array([[0, 0], [1, 1]]), np.array([[1, 0], [0, 1]])]
    m = np.hstack(blocks).astype(float)
    m = np.vstack([m, np.zeros_like(m)])
    assert not admm.is_feasible(m, cfg)
    assert admm.is_feasible(m, SparsityConfig(p=2, keep_k=2, pool_size=3))


def test_penalty_examples(rng):
    st_ = admm.init_state("w", np.zeros((2, 2)), POOL, rho=0.01)
    w = rng.standard_normal((2, 2))
    st_.Z = w.copy()
    val, g = admm.penalty(w, st_)
    assert val == 0.0 and np.array_equal(g, np.zeros((2, 2)))
    st_.Z = np.zeros((2, 2))
    val, g = admm.penalty(np.ones((2, 2)), st_)
    assert val == pytest.approx(0.02, abs=1e-15) and np.allclose(g, 0.01, rtol=0, atol=1e-18)
    with pytest.raises(DimensionError):
        admm.penalty(np.ones((3, 3)), st_)


def test_penalty_gradient_matches_finite_differences(rng):
    st_ = admm.init_state("w", np.zeros((4, 4)), POOL, rho=0.3)
    st_.Z, st_.U = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    w = rng.standard_normal((4, 4))
    _, g = admm.penalty(w, st_)
    assert grad_check(lambda a: admm.penalty(a, st_)[0], w, 1e-2, grad=g) < 1e-7


def test_project_examples(rng):
    m = pattern_prune(rng.standard_normal((8, 8)), TOPK)[0]
    assert np.array_equal(admm.project(m, TOPK), m)
    assert np.array_equal(admm.project(np.zeros((8, 8)), POOL), np.zeros((8, 8)))
    b = rng.standard_normal((4, 4))
    err, best = oracles.best_mask_error(b, 8)
    assert np.array_equal(admm.project(b, TOPK), b * best)


def test_projection_nearest_among_enumerated_feasible(rng):
    cfg = SparsityConfig(p=2, keep_k=2, mode=ProjectionMode.TOPK)
    v = rng.standard_normal((2, 4))
    dist = np.linalg.norm(v - admm.project(v, cfg))
    masks = oracles.all_masks(4, 2)
    for m1, m2 in itertools.product(masks, masks):
        z = np.hstack([(v[:, :2].ravel() * m1).reshape(2, 2), (v[:, 2:].ravel() * m2).reshape(2, 2)])
        assert dist <= np.linalg.norm(v - z) + 1e-15


def test_dual_update_examples():
    st_ = admm.init_state("w", np.zeros((1, 1)), SparsityConfig(p=1, keep_k=1), 1.0)
    st_.U, st_.Z = np.array([[1.0]]), np.array([[0.5]])
    admm.dual_update(st_, np.array([[2.0]]))
    assert st_.U.tolist() == [[2.5]] and st_.iteration == 1
    st_.Z = np.array([[3.0]])
    admm.dual_update(st_, np.array([[3.0]]))
    assert st_.U.tolist() == [[2.5]]


def test_project_state_feasible_and_pool_rebuild(rng):
    w = rng.standard_normal((8, 8))
    for freeze in (False, True):
        st_ = admm.init_state("w", w, POOL, 0.01, freeze_pool=freeze)
        admm.project_state(st_, w)
        first_pool = st_.pool
        assert admm.is_feasible(st_.Z, POOL, st_.pool)
        admm.project_state(st_, rng.standard_normal((8, 8)))
        assert admm.is_feasible(st_.Z, POOL)
        assert (st_.pool is first_pool) == freeze


def test_iterate_zero_iterations_is_noop(rng):
    st_ = admm.init_state("w", np.ones((4, 4)), POOL, 0.01)
    rep = admm.admm_iterate(lambda s: pytest.fail("solver called"), [st_], 0)
    assert rep.records == [] and st_.iteration == 0


def test_iterate_records_and_tolerance(rng):
    a = rng.standard_normal((8, 8))
    cfg = SparsityConfig(p=4, keep_k=8, pool_size=1)
    st_ = admm.init_state("w", a, cfg, 1.0, freeze_pool=True)
    state = {"w": a.copy()}

    def solve(states):
        s = states[0]
        state["w"] = (a + s.rho * (s.Z - s.U)) / (1 + s.rho)
        return {"w": state["w"]}, 0.5 * float(np.sum((state["w"] - a) ** 2))

    rep = admm.admm_iterate(solve, [st_], 500, tol=1e-8)
    assert rep.converged and len(rep.records) < 500
    r = rep.records[-1]
    assert r.relative_residual < 1e-8 and r.primal_residual >= 0
    assert all(rec.penalty >= 0 for rec in rep.records)


def test_iterate_nonfinite_loss_carries_report():
    st_ = admm.init_state("w", np.ones((4, 4)), POOL, 0.01)
    calls = []

    def solve(states):
        calls.append(1)
        return {"w": np.ones((4, 4))}, (1.0 if len(calls) == 1 else math.nan)

    with pytest.raises(NumericError) as exc:
        admm.admm_iterate(solve, [st_], 5)
    assert len(exc.value.report.records) == 1


def test_toy_quadratic_within_one_percent(rng):
    for cfg in (TOPK, POOL):
        for _ in range(5):
            a = rng.standard_normal((4, 4))
            _, _, obj = quadratic_admm(a, cfg, rho=0.01, iterations=200)
            best = oracles.quadratic_best_mask_objective(a, 8)
            assert obj <= 1.01 * best


def test_fixed_mask_residual_converges(rng):
    a = rng.standard_normal((8, 8))
    st_, w, _ = quadratic_admm(a, SparsityConfig(p=4, keep_k=8, pool_size=1), rho=0.5,
                               iterations=200, freeze_pool=True)
    assert np.linalg.norm(w - st_.Z) < 1e-6


@given(arrays(np.float64, (4, 8), elements=st.floats(-5, 5)),
       arrays(np.float64, (4, 8), elements=st.floats(-5, 5)),
       st.floats(1e-3, 10))
def test_penalty_value_formula(w, u, rho):
    st_ = admm.init_state("w", w, POOL, rho)
    st_.U = u
    admm.project_state(st_, w)
    val, g = admm.penalty(w, st_)
    r = w - st_.Z + u
    assert val == pytest.approx(0.5 * rho * float(np.sum(r * r)), rel=1e-12, abs=1e-300)
    assert np.array_equal(g, rho * r)
    assert admm.is_feasible(st_.Z, POOL)
