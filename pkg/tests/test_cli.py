import csv
import math

import numpy as np
import pytest

from marginnce import gradients
from marginnce.cli import fmt, main, read_provenance
from marginnce.verification import mc_feasibility_check

FAST_TRAIN = ["--steps", "20", "--n", "64", "--n-eval", "64", "--batch", "8", "--log-every", "10"]


def read_rows(path):
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        return list(csv.DictReader(fh))


class TestFormat:
    def test_significant_digits(self):
        assert fmt(math.pi) == "3.14159265"
        assert fmt(1e-20 / 3) == "3.33333333e-21"
        assert fmt(math.inf) == "inf" and fmt(True) == "1" and fmt(7) == "7"


class TestGradmap:
    def test_defaults(self, tmp_path):
        out = tmp_path / "g.csv"
        assert main(["gradmap", "--out", str(out)]) == 0
        text = out.read_bytes()
        assert b"\r" not in text
        lines = text.decode().splitlines()
        assert lines[0].startswith("# cmd=gradmap ")
        assert lines[1] == "theta,q,p,grad_abs"
        assert len(lines) - 2 == 2 * 101 ** 2

    def test_cells(self, tmp_path):
        out = tmp_path / "g.csv"
        main(["gradmap", "--m1", "0", "--m2", "0", "--out", str(out)])
        rows = read_rows(out)
        cell = {(r["theta"], r["q"], r["p"]): float(r["grad_abs"]) for r in rows}
        half_pi = fmt(math.pi / 2)
        assert cell[(half_pi, "1", "1")] == 0.0
        assert cell[(half_pi, "0.5", "1")] == 2.0

    def test_bad_grid(self, tmp_path):
        assert main(["gradmap", "--grid", "1", "--out", str(tmp_path / "g.csv")]) == 2

    def test_bad_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["gradmap", "--tau", "abc"])
        assert exc.value.code == 2


class TestMultmap:
    def test_cell(self, tmp_path):
        out = tmp_path / "m.csv"
        assert main(["multmap", "--out", str(out)]) == 0
        rows = read_rows(out)
        cell = next(r for r in rows if r["theta_pos"] == fmt(math.pi / 2) and r["q_tilde_pos"] == "0.17")
        assert float(cell["sin_term"]) == pytest.approx(math.cos(0.2), rel=1e-8)
        assert float(cell["prob_term"]) == pytest.approx(1.1027868040161556, rel=1e-8)

    def test_no_margin(self, tmp_path):
        out = tmp_path / "m.csv"
        main(["multmap", "--m1", "0", "--out", str(out)])
        for r in read_rows(out):
            assert r["prob_term"] == "1"
            assert r["sin_term"] in ("1", "inf")

    def test_singular_cells(self, tmp_path):
        out = tmp_path / "m.csv"
        main(["multmap", "--out", str(out)])
        edge = [r for r in read_rows(out) if float(r["theta_pos"]) in (0.0, float(fmt(math.pi)))]
        assert edge and all(r["sin_term"] == "inf" for r in edge)

    def test_feasible_matches_bounds(self, tmp_path):
        out = tmp_path / "m.csv"
        main(["multmap", "--grid", "9", "--out", str(out)])
        for r in read_rows(out):
            low, high = gradients.feasible_qtilde_range(float(r["theta_pos"]), 256, 0.25)
            assert r["feasible"] == str(int(low < float(r["q_tilde_pos"]) < high))
        # Monte Carlo never reaches a cell flagged infeasible
        lo, hi = mc_feasibility_check(math.pi / 2, 256, 0.25, trials=10_000, seed=0)
        row = [r for r in read_rows(out) if r["theta_pos"] == fmt(math.pi / 2)]
        for r in row:
            if r["feasible"] == "0":
                assert not lo <= float(r["q_tilde_pos"]) <= hi


class TestCurve:
    def test_values(self, tmp_path):
        out = tmp_path / "c.csv"
        assert main(["curve", "--c-list", "1,inf,2", "--points", "5", "--out", str(out)]) == 0
        cell = {(r["x"], r["c"]): r["gamma"] for r in read_rows(out)}
        assert cell[("0.25", "1")] == "0.75"
        assert all(cell[(x, "inf")] == "1" for x in ("0", "0.25", "0.5", "0.75"))
        assert float(cell[("0.5", "2")]) == pytest.approx(math.sqrt(0.75), rel=1e-9)

    def test_default_sweep(self, tmp_path):
        out = tmp_path / "c.csv"
        main(["curve", "--out", str(out)])
        cs = {r["c"] for r in read_rows(out)}
        assert cs == {fmt(1 / 3), "0.5", "0.7", "1", "1.5", "2.5", "5"}

    def test_bad_c(self, tmp_path):
        for bad in ("0,1", "1,x", ""):
            assert main(["curve", "--c-list", bad, "--out", str(tmp_path / "c.csv")]) == 2


class TestVerify:
    def test_mutation_exit_code(self, monkeypatch, capsys):
        original = gradients._sin_term
        monkeypatch.setattr(gradients, "_sin_term", lambda theta, m1: -original(theta, m1))
        assert main(["verify", "--seed", "0"]) == 1
        failed = [line for line in capsys.readouterr().out.splitlines() if line.startswith("FAILED: ")]
        assert failed and "decomposition_eq" in failed[0]


class TestTrain:
    def test_forbidden_combination(self, tmp_path):
        code = main(["train", "--mode", "byol_like", "--scheme", "attenuation_I", "--out", str(tmp_path / "t.csv")])
        assert code == 2

    def test_sweep_files(self, tmp_path):
        out = tmp_path / "t.csv"
        code = main(["train", *FAST_TRAIN, "--scheme", "curvature", "--sweep", "s=1,5,20", "c=0.7,1,2.5",
                     "--workers", "1", "--out", str(out)])
        assert code == 0
        files = sorted(p.name for p in tmp_path.glob("t_*.csv"))
        assert len(files) == 9
        assert "t_c0.7_s20.csv" in files

    def test_csv_layout(self, tmp_path):
        out = tmp_path / "t.csv"
        main(["train", *FAST_TRAIN, "--out", str(out)])
        rows = read_rows(out)
        assert list(rows[0]) == ["step", "loss", "align", "spread", "acc", "collapsed"]
        assert [r["step"] for r in rows] == ["10", "20"]

    def test_replay_round_trip(self, tmp_path):
        out, again = tmp_path / "t.csv", tmp_path / "again.csv"
        main(["train", *FAST_TRAIN, "--scheme", "pos_emphasis", "--s", "20", "--m1", "0.1", "--out", str(out)])
        assert main(["replay", str(out), "--out", str(again)]) == 0
        assert again.read_bytes() == out.read_bytes()
        assert read_provenance(out)["s"] == "20.0"

    def test_replay_maps(self, tmp_path):
        for cmd in (["gradmap", "--grid", "7", "--m1", "0.3"], ["multmap", "--grid", "5"], ["curve", "--points", "3"]):
            out, again = tmp_path / "a.csv", tmp_path / "b.csv"
            main([*cmd, "--out", str(out)])
            assert main(["replay", str(out), "--out", str(again)]) == 0
            assert again.read_bytes() == out.read_bytes()

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# fast run\nsteps = 20\nn=64\nn-eval=64\nbatch=8\nlog_every=10\nseed=5\n")
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(["train", "--config", str(cfg), "--out", str(a)]) == 0
        assert read_provenance(a)["seed"] == "5"
        main(["train", "--config", str(cfg), "--seed", "6", "--out", str(b)])
        assert read_provenance(b)["seed"] == "6"

    def test_config_unknown_key(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("bogus=1\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t.csv")]) == 2
