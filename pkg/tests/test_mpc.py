import numpy as np
import pytest

from pnp_dempc.lqr import LqWeights
from pnp_dempc.mpc import (
    CentralizedMpc,
    MpcInfeasible,
    centralized_mpc_step,
    collective_model,
    mpc_step,
    prediction_matrices,
    stage_cost,
)
from pnp_dempc.pnp import Network, design_all
from pnp_dempc.tube_synth import DesignOptions, Subsystem, design_controller


def finite_horizon_gain(a, b, q, r, p_n, N):
    """Backward scalar Riccati recursion from the terminal weight; returns the first-step gain."""
    p = p_n
    for _ in range(N):
        k = -b * p * a / (r + b * p * b)
        p = q + a * p * a + a * p * b * k
    return k


def test_prediction_matrices():
    A, B = np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([[0.0], [1.0]])
    Sx, Su, _ = prediction_matrices(A, B, 3)
    rng = np.random.default_rng(0)
    x, u = rng.normal(size=2), rng.normal(size=3)
    traj = (Sx @ x + Su @ u).reshape(4, 2)
    ref = [x]
    for k in range(3):
        ref.append(A @ ref[-1] + B[:, 0] * u[k])
    assert np.allclose(traj, ref)


def test_unconstrained_scalar_matches_lq():
    s = Subsystem.from_boxes(1, [[1.0]], [[1.0]], {}, [1e4], [1e4])
    w = LqWeights.diagonal(1, 1)
    c = design_controller(s, {}, DesignOptions(gain=[[-0.5]], weights=w, stage_weights=w, horizon=30))
    x = 3.0
    sol = mpc_step(c, s, [x])
    k = finite_horizon_gain(1.0, 1.0, 1.0, 1.0, c.terminal_cost[0, 0], 30)
    assert sol.u[0] == pytest.approx(k * x, abs=1e-6)
    assert sol.u[0] == pytest.approx(-0.6180339887 * x, abs=1e-6)


def test_in_tube_gives_zero_nominal(designed):
    net, _ = designed(1)
    rng = np.random.default_rng(0)
    for i in net.ids:
        c, s = net.controllers[i], net.subsystems[i]
        x = 0.5 * c.Z.set.G @ rng.uniform(-1, 1, c.Z.set.order)
        sol = mpc_step(c, s, x)
        assert np.abs(sol.v0).max() <= 1e-6
        assert np.abs(sol.xhat0).max() <= 1e-6
        assert np.allclose(sol.u, c.K @ x, atol=1e-6)


def test_far_state_infeasible(designed):
    net, _ = designed(1)
    c, s = net.controllers[1], net.subsystems[1]
    with pytest.raises(MpcInfeasible) as exc:
        mpc_step(c, s, [1.0, 0.0, 0.0, 0.0])
    assert exc.value.sub_id == 1


def test_solution_respects_tightened_sets(designed):
    net, _ = designed(1)
    c, s = net.controllers[2], net.subsystems[2]
    sol = mpc_step(c, s, [0.02, 0.05, 0.1, 0.1])
    assert np.all(c.Xhat_h.normals @ sol.nominal_x[:-1].T <= c.Xhat_h.offsets[:, None] + 1e-7)
    assert np.all(c.V.normals @ sol.nominal_v.T <= c.V.offsets[:, None] + 1e-7)
    assert np.all(c.terminal_set.normals @ sol.nominal_x[-1] <= c.terminal_set.offsets + 1e-7)
    assert np.allclose(sol.xhat0 + c.Z.set.G @ sol.d, [0.02, 0.05, 0.1, 0.1], atol=1e-8)
    assert sol.cost == pytest.approx(
        sum(stage_cost(c, sol.nominal_x[k], sol.nominal_v[k]) for k in range(c.horizon))
        + sol.nominal_x[-1] @ c.terminal_cost @ sol.nominal_x[-1], rel=1e-6)


def test_state_dimension_checked(designed):
    net, _ = designed(1)
    with pytest.raises(ValueError):
        mpc_step(net.controllers[1], net.subsystems[1], [0.0, 0.0])


def test_centralized_origin(designed):
    net, _ = designed(1)
    u = centralized_mpc_step(net, np.zeros(16))
    assert np.all(u == 0)


def test_collective_model_blocks(designed):
    net, _ = designed(1)
    A, B, L = collective_model(net.subsystems)
    assert A.shape == (16, 16) and B.shape == (16, 4) and L.shape == (16, 4)
    assert np.allclose(A[0:4, 4:8], net.subsystems[1].couplings[2])
    assert np.all(A[0:4, 8:12] == 0)


def test_centralized_separates_when_decoupled():
    subs = {
        1: Subsystem.from_boxes(1, [[1.0, 0.1], [0.0, 0.9]], [[0.0], [1.0]], {}, [1.0, 1.0], [0.5]),
        2: Subsystem.from_boxes(2, [[0.8]], [[1.0]], {}, [1.0], [0.3]),
    }
    subs[2] = Subsystem.from_boxes(2, [[0.8, 0.0], [0.2, 1.1]], [[1.0], [0.5]], {}, [1.0, 1.0], [0.3])
    net = Network(subs, options=DesignOptions(budget=30, horizon=8))
    design_all(net)
    x = np.array([0.5, -0.3, 0.4, 0.6])
    u_all, _ = CentralizedMpc(net.subsystems, net.controllers, 8).step(x)
    u1, _ = CentralizedMpc({1: subs[1]}, net.controllers, 8).step(x[:2])
    u2, _ = CentralizedMpc({2: subs[2]}, net.controllers, 8).step(x[2:])
    assert np.allclose(u_all, np.concatenate([u1, u2]), atol=1e-6)
