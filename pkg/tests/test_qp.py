import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import active_set_oracle, random_qp
from pnp_dempc.qp import Infeasible, QuadProgram, Unbounded, is_psd, kkt_residual, solve


def test_active_bound():
    sol = solve(QuadProgram([[2.0]], [0.0], Ain=[[-1.0]], bin=[-1.0]))
    assert sol.z[0] == pytest.approx(1.0, abs=1e-8)
    assert sol.objective == pytest.approx(1.0, abs=1e-8)


def test_unconstrained():
    sol = solve(QuadProgram(2 * np.eye(3), np.zeros(3)))
    assert np.abs(sol.z).max() <= 1e-10


def test_equality_constrained():
    # min |z|^2 s.t. z1 + z2 = 1
    sol = solve(QuadProgram(2 * np.eye(2), np.zeros(2), [[1.0, 1.0]], [1.0]))
    assert np.allclose(sol.z, [0.5, 0.5], atol=1e-9)


def test_random_against_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        H, g, A, b, _, _ = random_qp(rng)
        z_ref, f_ref = active_set_oracle(H, g, A, b)
        sol = solve(QuadProgram(H, g, Ain=A, bin=b))
        assert np.abs(sol.z - z_ref).max() <= 1e-6
        assert sol.objective == pytest.approx(f_ref, abs=1e-6)


def test_with_equalities_against_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        H, g, A, b, Aeq, beq = random_qp(rng, n=4, mi=4, me=1)
        ref = active_set_oracle(H, g, A, b, Aeq, beq)
        try:
            sol = solve(QuadProgram(H, g, Aeq, beq, A, b))
        except Infeasible:
            assert ref is None
            continue
        assert np.abs(sol.z - ref[0]).max() <= 1e-6


def test_infeasible_certificate():
    p = QuadProgram(np.eye(2), np.zeros(2), Ain=[[1.0, 0.0], [-1.0, 0.0]], bin=[-1.0, -1.0])
    with pytest.raises(Infeasible) as exc:
        solve(p)
    y_eq, y_in = exc.value.certificate
    assert np.all(y_in >= 0)
    assert np.abs(p.Ain.T @ y_in).max() <= 1e-9
    assert p.bin @ y_in < 0


def test_unbounded():
    with pytest.raises(Unbounded):
        solve(QuadProgram(np.zeros((2, 2)), [1.0, 0.0], Ain=[[0.0, 1.0]], bin=[1.0]))


def test_not_psd():
    assert not is_psd(np.array([[1.0, 0.0], [0.0, -1.0]]))
    assert is_psd(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(ValueError):
        solve(QuadProgram([[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0]))


def test_semidefinite_lp_like():
    # H singular: min z1 s.t. 0 <= z <= 1 on the first coordinate, quadratic on the second
    H = np.diag([0.0, 2.0])
    sol = solve(QuadProgram(H, [1.0, -2.0], Ain=[[-1.0, 0.0], [1.0, 0.0]], bin=[0.0, 1.0]))
    assert np.allclose(sol.z, [0.0, 1.0], atol=1e-7)


def test_dimension_errors():
    with pytest.raises(ValueError):
        QuadProgram(np.eye(2), [0.0])
    with pytest.raises(ValueError):
        QuadProgram(np.eye(2), [0.0, 0.0], Ain=[[1.0, 0.0]], bin=[1.0, 2.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_row_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    H, g, A, b, _, _ = random_qp(rng, n=4, mi=6)
    b = np.abs(b) + 0.1
    sol = solve(QuadProgram(H, g, Ain=A, bin=b))
    perm = rng.permutation(len(b))
    sol2 = solve(QuadProgram(H, g, Ain=A[perm], bin=b[perm]))
    assert np.abs(sol.z - sol2.z).max() <= 1e-8 * (1 + np.abs(sol.z).max())


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_optimal_below_feasible_samples(seed):
    rng = np.random.default_rng(seed)
    H, g, A, b, _, _ = random_qp(rng, n=3, mi=4)
    b = np.abs(b) + 0.1  # the origin is strictly feasible
    p = QuadProgram(H, g, Ain=A, bin=b)
    sol = solve(p)
    assert kkt_residual(p, sol.z, sol.y, sol.lam) <= 1e-7
    for z in rng.normal(size=(200, 3)):
        if np.all(A @ z <= b):
            assert sol.objective <= p.objective(z) + 1e-9
