import csv
import hashlib
import json
import math
import re
from pathlib import Path

import numpy as np
import pytest

from helpers import random_system
from magsens import cli
from magsens.fidelity import StateTransfer
from magsens.model import ControlSystem, SplineField
from magsens.plot import log_span
from magsens.synthesis import Controller, Problem, SynthesisConfig, dump_archive, load_config

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SZ = np.diag([1.0, -1.0]).astype(complex)


def qubit_config_dict(**overrides) -> dict:
    system = ControlSystem(-0.5j * SZ, (-1j * SX,))
    data = dict(
        system="custom",
        custom_system=system.to_dict(),
        custom_kind=StateTransfer([1, 0], [0, 1]).to_dict(),
        basis="spline",
        t_final=2.0,
        segments=2,
        amplitude_bound=2.0,
        steps=40,
        restarts=3,
        max_iter=100,
    )
    data.update(overrides)
    return data


def perfect_archive(path):
    """Drift and control both along sigma_x; total rotation angle pi/2 gives exact transfer."""
    system = ControlSystem(-0.5j * SX, (-1j * SX,))
    cfg = SynthesisConfig(**qubit_config_dict(custom_system=system.to_dict(), t_final=1.0, segments=1,
                                              amplitude_bound=3.0, steps=10))
    v = np.pi - 1.0  # u(t) = v t integrates to v / 2; the drift contributes 1 / 2
    field = SplineField(1.0, [v], [v, v])
    problem = Problem(cfg)
    ctrl = Controller(problem.params([field]), [field], problem.fidelity([field]), 0, 0, 0, 0, 0.0)
    path.write_text(dump_archive(cfg, [ctrl]))
    return ctrl


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestSynthesize:
    def test_writes_archive_and_manifest(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(qubit_config_dict(), indent=1))
        out = tmp_path / "run"
        assert cli.main(["synthesize", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
        archive = json.loads((out / "controllers.json").read_text())
        assert archive["config"]["seed"] == 3
        assert len(archive["controllers"]) >= 1
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "synthesize"
        assert manifest["seed"] == 3
        for entry in manifest["outputs"]:
            assert sha(out / entry["path"]) == entry["sha256"]

    def test_byte_identical_for_fixed_seed(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(qubit_config_dict()))
        for name in ("a", "b"):
            cli.main(["synthesize", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / name)])
        assert (tmp_path / "a" / "controllers.json").read_bytes() == (tmp_path / "b" / "controllers.json").read_bytes()

    def test_malformed_config(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{\n  "system": "spin_ring",\n  "segments": "three"\n}\n')
        assert cli.main(["synthesize", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
        err = capsys.readouterr().err
        assert re.search(r"config error: line 3, field 'segments'", err)

    def test_missing_config(self, tmp_path, capsys):
        assert cli.main(["synthesize", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
        assert "error" in capsys.readouterr().err


class TestAnalyze:
    @pytest.fixture
    def archive(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(qubit_config_dict()))
        cli.main(["synthesize", "--config", str(cfg), "--out", str(tmp_path / "syn")])
        return tmp_path / "syn" / "controllers.json"

    def test_outputs(self, archive, tmp_path):
        out = tmp_path / "ana"
        assert cli.main(["analyze", "--archive", str(archive), "--out", str(out), "--fd-check"]) == 0
        rows = read_csv(out / "analysis.csv")
        assert list(rows[0]) == ["id", "infidelity", "abs_d0F", "abs_d1F", "beta", "status"]
        for r in rows:
            assert float(r["beta"]) >= max(float(r["abs_d0F"]), float(r["abs_d1F"]))
            assert r["status"] == "ok"
            assert re.fullmatch(r"-?\d\.\d{16}e[+-]\d+", r["beta"])
        sens = read_csv(out / "sensitivity.csv")
        # near F = 1 the derivatives are tiny and the difference quotient carries
        # a rounding floor of roughly 1e-9, so the check is mixed relative/absolute
        for r in sens:
            for mu in ("0", "1"):
                exact, est = float(r[f"d{mu}F"]), float(r[f"fd_d{mu}F"])
                assert abs(exact - est) <= 1e-5 * abs(est) + 1e-8
                assert float(r[f"fd_rel_err{mu}"]) == pytest.approx(abs(exact - est) / abs(est), rel=1e-6)
        reports = json.loads((out / "reports.json").read_text())
        assert len(reports) == len(rows)
        manifest = json.loads((out / "manifest.json").read_text())
        assert {e["path"] for e in manifest["outputs"]} == {"analysis.csv", "sensitivity.csv", "reports.json", "summary.json"}
        for entry in manifest["outputs"]:
            assert sha(out / entry["path"]) == entry["sha256"]

    def test_deterministic(self, archive, tmp_path):
        for name in ("a", "b"):
            cli.main(["analyze", "--archive", str(archive), "--out", str(tmp_path / name)])
        for f in ("analysis.csv", "sensitivity.csv", "reports.json", "summary.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_perfect_controller(self, tmp_path):
        archive = tmp_path / "perfect.json"
        ctrl = perfect_archive(archive)
        assert ctrl.fidelity == pytest.approx(1.0, abs=1e-14)
        out = tmp_path / "ana"
        assert cli.main(["analyze", "--archive", str(archive), "--out", str(out)]) == 0
        row = read_csv(out / "analysis.csv")[0]
        assert float(row["abs_d0F"]) <= 1e-8
        assert float(row["abs_d1F"]) <= 1e-8

    def test_tampered_row_flagged(self, archive, tmp_path, capsys):
        data = json.loads(archive.read_text())
        data["controllers"][0]["fidelity"] -= 1e-3
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(data))
        out = tmp_path / "ana"
        assert cli.main(["analyze", "--archive", str(bad), "--out", str(out)]) == cli.EXIT_FLAGGED
        rows = read_csv(out / "analysis.csv")
        assert rows[0]["status"] == "fidelity-mismatch"
        assert all(r["status"] == "ok" for r in rows[1:])
        summary = json.loads((out / "summary.json").read_text())
        assert summary["flagged"] == 1


def analysis_text(rows):
    head = "id,infidelity,abs_d0F,abs_d1F,abs_d2F,beta,status\n"
    return head + "".join(",".join(map(str, r)) + ",ok\n" for r in rows)


class TestPlot:
    ROWS = [
        ("r0000", 1e-3, 2e-4, 1e-5, 3e-4, 4e-3),
        ("r0001", 5e-3, 1e-3, 2e-4, 0.0, 2e-2),
        ("r0002", 2e-2, 3e-3, 4e-4, 1e-3, 5e-2),
    ]

    def test_mark_count(self, tmp_path):
        src = tmp_path / "a.csv"
        src.write_text(analysis_text(self.ROWS))
        out = tmp_path / "fig.svg"
        assert cli.main(["plot", "--csv", str(src), "--out", str(out)]) == 0
        svg = out.read_text()
        assert svg.count('class="mark"') == 12
        assert svg.count("<rect class=\"mark\"") == 3
        assert "legend" in svg and "infidelity" in svg

    def test_deterministic(self, tmp_path):
        src = tmp_path / "a.csv"
        src.write_text(analysis_text(self.ROWS))
        for name in ("a.svg", "b.svg"):
            cli.main(["plot", "--csv", str(src), "--out", str(tmp_path / name)])
        assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()

    def test_axis_margin(self):
        lo, hi = log_span([1e-3, 2e-2])
        span = math.log10(2e-2) - math.log10(1e-3)
        assert lo == pytest.approx(-3 - 0.1 * span)
        assert hi == pytest.approx(math.log10(2e-2) + 0.1 * span)

    def test_marks_inside_frame(self, tmp_path):
        src = tmp_path / "a.csv"
        src.write_text(analysis_text(self.ROWS))
        svg = cli.plot_from_csv(src.read_text())
        xs = [float(v) for v in re.findall(r'class="mark"[^>]*cx="([\d.]+)"', svg)]
        assert min(xs) > 80 and max(xs) < 640 - 170

    def test_empty_csv(self, tmp_path, capsys):
        src = tmp_path / "a.csv"
        src.write_text("id,infidelity,abs_d0F,beta,status\n")
        assert cli.main(["plot", "--csv", str(src), "--out", str(tmp_path / "f.svg")]) == 2
        assert "no data" in capsys.readouterr().err


def convergence_config(tmp_path, system, fields, **extra):
    data = {"system": system, "t_final": 2.0, "steps": 10, "fields": [f.to_dict() for f in fields], **extra}
    path = tmp_path / "conv.json"
    path.write_text(json.dumps(data))
    return path


class TestConvergence:
    def test_fourth_order(self, tmp_path, rng):
        from helpers import random_fourier

        system = random_system(4, 2, rng)
        path = convergence_config(tmp_path, system.to_dict(), random_fourier(2.0, 2, rng))
        out = tmp_path / "conv.csv"
        assert cli.main(["convergence", "--config", str(path), "--out", str(out)]) == 0
        rows = read_csv(out)
        assert [int(r["steps"]) for r in rows] == [10, 20, 40, 80]
        orders = [float(r["order"]) for r in rows[1:]]
        assert all(3.6 <= o <= 4.4 for o in orders), orders
        assert all(r["status"] == "ok" for r in rows)

    def test_preset_name(self, tmp_path, rng):
        from magsens.model import FourierField

        fields = [FourierField(2.0, [1.0, 0.5], [2.0, 3.0]), FourierField(2.0, [0.3], [1.0])]
        path = convergence_config(tmp_path, "transmon", fields, anharmonicity=5.0)
        assert cli.main(["convergence", "--config", str(path), "--out", str(tmp_path / "c.csv")]) == 0

    def test_commuting_floor(self, tmp_path, rng):
        from magsens.model import FourierField

        system = ControlSystem(-1j * np.diag([0.3, -0.1, 0.7]), (-1j * np.diag([1.0, 0.0, -1.0]),))
        fields = [FourierField(2.0, [0.5], [1.0])]
        path = convergence_config(tmp_path, system.to_dict(), fields, steps=400)
        out = tmp_path / "c.csv"
        cli.main(["convergence", "--config", str(path), "--out", str(out)])
        rows = read_csv(out)
        assert all(float(r["error"]) <= 1e-10 for r in rows)
        assert rows[-1]["status"] == "floor"

    def test_non_monotone_flagged(self, monkeypatch):
        fakes = iter([np.eye(2), np.eye(2) * (1 + 1e-3), np.eye(2) * (1 + 1e-4), np.eye(2) * (1 + 1e-6),
                      np.eye(2) * (1 + 1e-5)])
        monkeypatch.setattr(cli, "final_propagator", lambda *a: next(fakes))
        rows = cli.convergence_rows(None, None, cli.TimeGrid(1.0, 4))
        assert [r["status"] for r in rows] == ["ok", "ok", "ok", "warning:non-monotone"]

    def test_missing_key(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"system": "spin_ring", "t_final": 1.0, "steps": 3}))
        assert cli.main(["convergence", "--config", str(path), "--out", str(tmp_path / "o.csv")]) == 2
        assert "field 'fields'" in capsys.readouterr().err


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    out = capsys.readouterr().out
    for name in ("synthesize", "analyze", "plot", "convergence"):
        assert name in out


class TestShippedConfigs:
    ROOT = Path(__file__).resolve().parent.parent / "configs"

    @pytest.mark.parametrize("name, steps", [("spin_ring.json", 150), ("transmon.json", 50)])
    def test_synthesis_presets(self, name, steps):
        cfg = load_config(self.ROOT / name)
        assert Problem(cfg).grid.steps == steps

    def test_convergence_config(self):
        system, fields, grid, ref, halvings = cli.load_convergence_config(self.ROOT / "convergence_spin_ring.json")
        assert (system.dim, len(fields), grid.steps, ref, halvings) == (4, 2, 30, 64, 3)
