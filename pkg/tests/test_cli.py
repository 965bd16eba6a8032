import csv
import json

import pytest

from pnp_dempc.cli import EXIT_INFEASIBLE, EXIT_INPUT, EXIT_OK, EXIT_REJECTED, load_snapshot, main
from pnp_dempc.powernet import BUILTIN_AREAS

TRACE_HEADER = ["t", "area", "x1", "x2", "x3", "x4", "u", "load", "vopt", "cost"]
TIES_HEADER = ["t", "i", "j", "ptie"]


def area_doc(i, ties=None, **over):
    p = BUILTIN_AREAS[i]
    doc = {"id": i, "H": p.H, "R": p.R, "D": p.D, "Tt": p.Tt, "Tg": p.Tg, "u_bound": p.u_bound}
    doc["ties"] = {str(j): P for j, P in (ties or {}).items()}
    doc.update(over)
    return doc


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def s1(tmp_path_factory):
    out = tmp_path_factory.mktemp("s1")
    assert main(["design", "--scenario", "1", "--out", str(out)]) == EXIT_OK
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_design_report(s1):
    rep = json.loads((s1 / "design.json").read_text())
    assert rep["status"] == "ok"
    assert sorted(rep["areas"]) == ["1", "2", "3", "4"]
    for a in rep["areas"].values():
        assert a["alpha"] < 1 and a["lhat"] > 0 and a["beta"] < 1
        assert a["delta"] == 1e-4 and len(a["K"][0]) == 4
        assert a["rpi_generators"] > 0 and a["terminal_faces"] > 0
    assert rep["gamma_spectral_radius"] < 1 and rep["gamma_schur"]
    assert rep["options"]["horizon"] == 20


def test_design_toy_rejected(tmp_path, capsys):
    toy = {"subsystems": [
        {"id": 1, "A": [[0.5]], "B": [[1.0]], "couplings": {"2": [[1.5]]}, "x_bounds": [1.0], "u_bounds": [1.0]},
        {"id": 2, "A": [[0.5]], "B": [[1.0]], "x_bounds": [1.0], "u_bounds": [1.0]},
    ], "defaults": {"budget": 60}}
    code = main(["design", "--network", write_json(tmp_path / "toy.json", toy), "--out", str(tmp_path)])
    assert code == EXIT_REJECTED
    rep = json.loads((tmp_path / "design.json").read_text())
    assert rep["reason"] == "alpha≥1" and rep["subsystem"] == 1


def test_design_malformed_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"areas": [')
    assert main(["design", "--network", str(bad)]) == EXIT_INPUT
    assert "cannot load network" in capsys.readouterr().err


def test_bad_arguments():
    assert main(["design", "--scenario", "7"]) == EXIT_INPUT
    assert main(["simulate", "--mode", "both"]) == EXIT_INPUT
    assert main([]) == EXIT_INPUT
    assert main(["design", "--horizon", "0", "--network", "/nonexistent.json"]) == EXIT_INPUT


def test_bad_snapshot(tmp_path):
    f = tmp_path / "x.pkl"
    f.write_bytes(b"not a pickle")
    assert main(["simulate", "--snapshot", str(f)]) == EXIT_INPUT


def test_simulate_modes_and_determinism(s1, tmp_path):
    snap = str(s1 / "network.pkl")
    for mode in ("dec", "cen"):
        assert main(["simulate", "--snapshot", snap, "--mode", mode, "--t-end", "30", "--out", str(tmp_path)]) == 0
    dec, cen = read_csv(tmp_path / "trace_dec.csv"), read_csv(tmp_path / "trace_cen.csv")
    assert dec[0] == TRACE_HEADER and cen[0] == TRACE_HEADER
    assert len(dec) == len(cen) == 1 + 31 * 4
    assert read_csv(tmp_path / "ties_dec.csv")[0] == TIES_HEADER
    first = (tmp_path / "trace_dec.csv").read_bytes()
    again = tmp_path / "again"
    assert main(["simulate", "--snapshot", snap, "--mode", "dec", "--t-end", "30", "--out", str(again)]) == 0
    assert (again / "trace_dec.csv").read_bytes() == first
    assert (again / "ties_dec.csv").read_bytes() == (tmp_path / "ties_dec.csv").read_bytes()
    summary = json.loads((tmp_path / "summary_dec.json").read_text())
    assert summary["status"] == "ok"
    assert all(a["min_state_margin"] >= 0 and a["min_input_margin"] >= 0 for a in summary["areas"].values())


def test_csv_twelve_digits(s1, tmp_path):
    main(["simulate", "--snapshot", str(s1 / "network.pkl"), "--t-end", "10", "--out", str(tmp_path)])
    rows = read_csv(tmp_path / "trace_dec.csv")[1:]
    digits = [len(v.lstrip("-").split("e")[0].replace(".", "").lstrip("0")) for r in rows for v in r[2:]]
    assert max(digits) == 12


def test_zero_load_all_zero(s1, tmp_path):
    code = main(["simulate", "--snapshot", str(s1 / "network.pkl"), "--zero-load", "--t-end", "20",
                 "--out", str(tmp_path)])
    assert code == EXIT_OK
    rows = read_csv(tmp_path / "trace_dec.csv")[1:]
    assert all(float(v) == 0.0 for r in rows for v in r[2:6])


def test_simulate_infeasible(tmp_path):
    doc = {"areas": [area_doc(1, {2: 4.0}), area_doc(2)], "loads": [[5, 1, 2.0]], "defaults": {"budget": 100}}
    code = main(["simulate", "--network", write_json(tmp_path / "big.json", doc), "--out", str(tmp_path)])
    assert code == EXIT_INFEASIBLE
    rows = read_csv(tmp_path / "trace_dec.csv")
    assert float(rows[-1][0]) == 4.0
    assert json.loads((tmp_path / "summary_dec.json").read_text())["status"] == "infeasible"


def test_pnp_plug_unplug(s1, tmp_path):
    snap = tmp_path / "net.pkl"
    snap.write_bytes((s1 / "network.pkl").read_bytes())
    assert main(["pnp", "plug", "5", "--snapshot", str(snap), "--out", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "pnp.json").read_text())
    assert rep["redesigned"] == [5, 2, 4] and rep["changed_controllers"] == [2, 4, 5]
    assert rep["gamma_rho_after"] < 1
    net, _ = load_snapshot(snap)
    assert net.ids == [1, 2, 3, 4, 5]

    sim = tmp_path / "sim"
    assert main(["simulate", "--snapshot", str(snap), "--t-end", "5", "--out", str(sim)]) == EXIT_OK
    pairs = {(int(r[1]), int(r[2])) for r in read_csv(sim / "ties_dec.csv")[1:]}
    assert {(2, 5), (4, 5)} <= pairs

    assert main(["pnp", "unplug", "4", "--snapshot", str(snap), "--out", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "pnp.json").read_text())
    assert rep["redesigned"] == [3, 5] and rep["changed_controllers"] == [3, 4, 5]

    before = snap.read_bytes()
    assert main(["pnp", "unplug", "9", "--snapshot", str(snap)]) == EXIT_INPUT
    assert main(["pnp", "plug", "2", "--snapshot", str(snap)]) == EXIT_INPUT
    assert snap.read_bytes() == before


def test_pnp_rejected_leaves_snapshot(tmp_path):
    doc = {"areas": [area_doc(1, {2: 4.0}), area_doc(2),
                     {"id": 3, "H": 8, "R": 0.08, "D": 0.9, "Tt": 0.3, "Tg": 0.1, "u_bound": 0.05,
                      "ties": {"2": 200.0}}],
           "members": [1, 2], "defaults": {"budget": 100}}
    assert main(["design", "--network", write_json(tmp_path / "n.json", doc), "--out", str(tmp_path)]) == 0
    snap = tmp_path / "network.pkl"
    before = snap.read_bytes()
    assert main(["pnp", "plug", "3", "--snapshot", str(snap), "--out", str(tmp_path)]) == EXIT_REJECTED
    rep = json.loads((tmp_path / "pnp.json").read_text())
    assert rep["status"] == "rejected" and rep["reason"] == "alpha≥1"
    assert snap.read_bytes() == before
