import json

import numpy as np
import pytest

from pnp_dempc.powernet import (
    BUILTIN_AREAS,
    AreaCatalogue,
    AreaParams,
    ContinuousArea,
    LoadSchedule,
    build_area,
    discretize,
    parse_network,
    scenario,
    symmetrize_ties,
    tie_power,
)

# Area 1 with tie to area 2, T = 1: Richardson-extrapolated forward Euler (1e6 / 2e6 steps)
EULER_AD = np.array([
    [9.2320152520500e-01, 8.4856406290500e-01, 1.2029039488000e-02, 1.5931028350000e-03],
    [-1.4142734381800e-01, 5.7983117309100e-01, 1.6850621360000e-02, 2.5751862470000e-03],
    [1.2744822680030e+00, -1.2360893984310e+01, 1.7565977388000e-02, 1.2307131148000e-02],
    [2.6135791161180e+00, -1.2898065609627e+01, -3.3477421207500e-01, -5.0123243930000e-02],
])
EULER_BD = np.array([0.005577476395, 0.01593102835, 0.651506324587, 0.731502676923])
EULER_LD = np.array([-0.019199618717, -0.035356835953, 0.318620566993, 0.653394779006])
EULER_A12 = np.array([0.076798474867, 0.141427343812, -1.27448226797, -2.613579116024])


def test_area1_coupling_entries():
    c = build_area(BUILTIN_AREAS[1], {1, 2})
    assert c.A[1, 0] == pytest.approx(-1 / 6)
    assert c.couplings[2][1, 0] == pytest.approx(1 / 6)
    assert np.count_nonzero(c.couplings[2]) == 1


def test_area_without_neighbors():
    c = build_area(BUILTIN_AREAS[1], {1})
    assert c.A[1, 0] == 0 and not c.couplings


def test_continuous_structure():
    for i, p in BUILTIN_AREAS.items():
        c = build_area(p)
        # angle integrator: with no ties the first column vanishes
        c0 = build_area(p, set())
        assert np.min(np.abs(np.linalg.eigvals(c0.A))) <= 1e-12
        for Aij in c.couplings.values():
            assert np.count_nonzero(Aij) == 1 and Aij[1, 0] > 0


def test_discretize_zero_matrix():
    d = discretize(ContinuousArea(np.zeros((2, 2)), np.array([[1.0], [2.0]]), np.zeros((2, 1)), {}), 0.5)
    assert np.allclose(d.A, np.eye(2))
    assert np.allclose(d.B, [[0.5], [1.0]])


def test_discretize_scalar_closed_form():
    a, b, T = -0.7, 2.0, 1.3
    d = discretize(ContinuousArea(np.array([[a]]), np.array([[b]]), np.zeros((1, 1)), {}), T)
    assert d.A[0, 0] == pytest.approx(np.exp(a * T), rel=1e-14)
    assert d.B[0, 0] == pytest.approx((np.exp(a * T) - 1) / a * b, rel=1e-13)


def test_discretize_area1_fine_step_oracle():
    d = discretize(build_area(BUILTIN_AREAS[1], {1, 2}), 1.0)
    assert np.abs(d.A - EULER_AD).max() <= 1e-6
    assert np.abs(d.B[:, 0] - EULER_BD).max() <= 1e-6
    assert np.abs(d.L[:, 0] - EULER_LD).max() <= 1e-6
    assert np.abs(d.couplings[2][:, 0] - EULER_A12).max() <= 1e-6


def test_discretize_commutes_with_decoupling():
    # two areas: the collective continuous system discretized with neighbor states held
    # piecewise constant equals assembling each area's discretized blocks
    areas = {1: AreaParams(12, 0.05, 0.7, 0.65, 0.1, 0.5, tie={2: 4.0}),
             2: AreaParams(10, 0.0625, 0.9, 0.4, 0.1, 0.65)}
    cat = AreaCatalogue(areas)
    subs = cat.subsystems((1, 2))
    for i, j in ((1, 2), (2, 1)):
        c = build_area(cat.areas[i], {1, 2})
        n = 4
        M = np.zeros((n + 6, n + 6))
        M[:n, :n] = c.A
        M[:n, n:n + 1] = c.B
        M[:n, n + 1:n + 2] = c.L
        M[:n, n + 2:] = c.couplings[j]
        from scipy.linalg import expm
        E = expm(M)
        assert np.allclose(subs[i].A, E[:n, :n], atol=1e-12)
        assert np.allclose(subs[i].couplings[j], E[:n, n + 2:], atol=1e-12)


def test_discretize_rejects_bad_period():
    with pytest.raises(ValueError):
        discretize(build_area(BUILTIN_AREAS[1]), 0.0)


def test_tie_power():
    assert tie_power(4.0, 0.01, 0.0) == pytest.approx(0.04)
    assert tie_power(4.0, 0.3, 0.3) == 0
    assert tie_power(2.0, 0.1, -0.2) == -tie_power(2.0, -0.2, 0.1)


def test_symmetrize_conflict():
    areas = {1: AreaParams(1, 1, 1, 1, 1, 1, tie={2: 1.0}), 2: AreaParams(1, 1, 1, 1, 1, 1, tie={1: 2.0})}
    with pytest.raises(ValueError):
        symmetrize_ties(areas)


def test_scenario_parameters():
    net, sched = scenario(1)
    assert net.ids == [1, 2, 3, 4]
    cat = net.catalogue
    assert [cat.areas[i].H for i in net.ids] == [12, 10, 8, 8]
    assert [cat.areas[i].Tt for i in net.ids] == [0.65, 0.4, 0.3, 0.6]
    assert sched.events[0] == (5.0, 1, 0.15)
    assert sched.load_at(5, [1])[1] == pytest.approx(0.15)
    assert sched.load_at(4.5, [1])[1] == 0


def test_scenario_topologies():
    net2, _ = scenario(2)
    assert net2.subsystems[5].neighbors == {2, 4}
    assert net2.subsystems[2].neighbors == {1, 3, 5}
    net3, _ = scenario(3)
    assert 4 not in net3.subsystems
    # removed ties leave area 3 with neighbor 2 only and area 5 with neighbor 2 only
    assert net3.subsystems[3].neighbors == {2}
    assert net3.subsystems[5].neighbors == {2}
    c3 = build_area(net3.catalogue.areas[3], {2, 3})
    assert c3.A[1, 0] == pytest.approx(-2.0 / 16)
    with pytest.raises(ValueError):
        scenario(4)


def test_load_schedule_cumulative():
    s = LoadSchedule(((40, 3, -0.12), (20, 3, 0.12)))
    assert s.load_at(30, [3])[3] == pytest.approx(0.12)
    assert s.load_at(40, [3])[3] == pytest.approx(0.0)
    with pytest.raises(ValueError):
        LoadSchedule(((-1, 1, 0.1),))


def test_parse_network_roundtrip():
    doc = {
        "areas": [{"id": 1, "H": 12, "R": 0.05, "D": 0.7, "Tt": 0.65, "Tg": 0.1, "u_bound": 0.5, "ties": {"2": 4}},
                  {"id": 2, "H": 10, "R": 0.0625, "D": 0.9, "Tt": 0.4, "Tg": 0.1, "u_bound": 0.65}],
        "constraints": {"omega_bound": 0.4},
        "loads": [[5, 1, 0.1]],
        "defaults": {"horizon": 10, "T": 0.5},
    }
    cat, members, loads, defaults = parse_network(json.loads(json.dumps(doc)))
    assert members == (1, 2)
    assert cat.T == 0.5 and defaults == {"horizon": 10}
    assert cat.areas[2].tie == {1: 4.0}
    assert cat.areas[1].omega_bound == 0.4
    assert cat.ties({1, 2}) == [(1, 2, 4.0)]


@pytest.mark.parametrize("doc", [
    [],
    {"areas": [{"H": 1}]},
    {"areas": [{"id": 1, "H": 1, "R": 1, "D": 1, "Tt": 1, "Tg": 1}]},
    {"areas": [{"id": 1, "H": 1, "R": 1, "D": 1, "Tt": 1, "Tg": 1, "u_bound": 1, "ties": {"7": 1}}]},
    {"areas": [{"id": 1, "H": -1, "R": 1, "D": 1, "Tt": 1, "Tg": 1, "u_bound": 1}]},
    {"areas": [{"id": 1, "H": 1, "R": 1, "D": 1, "Tt": 1, "Tg": 1, "u_bound": 1, "bogus": 1}]},
    {"areas": [], "constraints": {"bogus": 1}},
])
def test_parse_network_errors(doc):
    with pytest.raises(ValueError):
        parse_network(doc)
