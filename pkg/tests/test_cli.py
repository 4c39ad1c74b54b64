import json
from pathlib import Path

import numpy as np
import pytest

from ltvrobust.cli import main
from ltvrobust.ltv import partitioned_to_json, system_to_json

from test_ltv import scalar_system
from test_iteration import mild_uncertain_plant


def write_problem(tmp_path, name, doc):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def scalar_problem(tmp_path):
    sys = scalar_system(-1.0, 1.0, 1.0, 0.0, 1.0)
    return write_problem(tmp_path, "nominal.json", {
        "system": system_to_json(sys),
        "performance": "l2e",
    })


class TestNominal:
    def test_scalar_l2e_value(self, scalar_problem, tmp_path, capsys):
        out = str(tmp_path / "result.json")
        code = main(["nominal", scalar_problem, "--bisect-tol", "1e-4",
                     "--oracle", "gramian", "--out", out])
        assert code == 0
        text = capsys.readouterr().out
        payload = json.loads(Path(out).read_text())
        exact = np.sqrt((1.0 - np.exp(-2.0)) / 2.0)
        assert payload["gamma"] == pytest.approx(exact, rel=1e-3)
        assert payload["oracle"]["value"] == pytest.approx(exact, rel=1e-6)
        assert "gamma" in text

    def test_missing_file_is_input_error(self, capsys):
        assert main(["nominal", "/nonexistent/problem.json"]) == 2

    def test_unknown_key_is_input_error(self, tmp_path):
        path = write_problem(tmp_path, "bad.json", {"system": {}, "zeta": 1})
        assert main(["nominal", path]) == 2

    def test_malformed_system_is_input_error(self, tmp_path):
        path = write_problem(tmp_path, "bad.json", {"system": {"grid": [0, 1]}})
        assert main(["nominal", path]) == 2


class TestRobust:
    def test_single_horizon(self, tmp_path, capsys):
        plant = mild_uncertain_plant(T=2.0)
        path = write_problem(tmp_path, "robust.json", {
            "partitioned_system": partitioned_to_json(plant),
            "iqc": {"type": "unit_norm_lti", "v": 1, "p": 10},
            "performance": "l2",
        })
        out = str(tmp_path / "r.json")
        code = main(["robust", path, "--out", out])
        assert code == 0
        payload = json.loads(Path(out).read_text())
        assert payload["gamma"] > 0
        assert payload["log"]["termination"] == "converged"

    def test_horizon_sweep_csv(self, tmp_path):
        plant = mild_uncertain_plant(T=2.0)
        path = write_problem(tmp_path, "robust.json", {
            "partitioned_system": partitioned_to_json(plant),
            "iqc": {"type": "unit_norm_lti", "v": 0, "p": 1},
        })
        csv_path = str(tmp_path / "curve.csv")
        code = main(["robust", path, "--horizons", "1,2", "--out-csv", csv_path])
        assert code == 0
        rows = Path(csv_path).read_text().strip().splitlines()
        assert rows[0] == "T,gamma"
        assert len(rows) == 3

    def test_beta_reach_radius(self, tmp_path, capsys):
        plant = mild_uncertain_plant(T=2.0)
        path = write_problem(tmp_path, "robust.json", {
            "partitioned_system": partitioned_to_json(plant),
            "iqc": {"type": "unit_norm_lti", "v": 1, "p": 10},
            "performance": "l2e",
        })
        out = str(tmp_path / "r.json")
        code = main(["robust", path, "--beta", "5", "--out", out])
        assert code == 0
        payload = json.loads(Path(out).read_text())
        assert payload["reach_radius"] == pytest.approx(5.0 * payload["gamma"])

    def test_missing_iqc_is_input_error(self, tmp_path):
        plant = mild_uncertain_plant(T=1.0)
        path = write_problem(tmp_path, "robust.json", {
            "partitioned_system": partitioned_to_json(plant),
        })
        assert main(["robust", path]) == 2


class TestWorstCase:
    def test_constructs_and_verifies(self, scalar_problem, tmp_path):
        csv_path = str(tmp_path / "wc.csv")
        out = str(tmp_path / "wc.json")
        code = main(["worstcase", scalar_problem, "--perf", "l2",
                     "--out", out, "--out-csv", csv_path])
        assert code == 0
        payload = json.loads(Path(out).read_text())
        assert payload["achieved_ratio"] >= 0.99 * payload["gamma_target"]
        rows = Path(csv_path).read_text().strip().splitlines()
        assert rows[0] == "t,d1"

    def test_target_above_gain_exits_3(self, scalar_problem, capsys):
        code = main(["worstcase", scalar_problem, "--perf", "l2",
                     "--gamma-target", "10.0"])
        assert code == 3
        assert "no conjugate point" in capsys.readouterr().err

    def test_csv_reproduces_ratio(self, scalar_problem, tmp_path):
        import csv as csvmod

        from ltvrobust.ltv import TimeGrid, VectorSignal, l2_norm, simulate

        csv_path = tmp_path / "wc.csv"
        out = str(tmp_path / "wc.json")
        code = main(["worstcase", scalar_problem, "--perf", "l2",
                     "--out", out, "--out-csv", str(csv_path)])
        assert code == 0
        with open(csv_path) as f:
            rows = list(csvmod.reader(f))
        ts = np.array([float(r[0]) for r in rows[1:]])
        ds = np.array([[float(r[1])] for r in rows[1:]])
        d = VectorSignal(TimeGrid(ts), ds)
        sys = scalar_system(-1.0, 1.0, 1.0, 0.0, 1.0)
        _, e = simulate(sys, d, [0.0], rtol=1e-10, atol=1e-13)
        payload = json.loads(Path(out).read_text())
        assert l2_norm(e) / l2_norm(d) == pytest.approx(payload["achieved_ratio"],
                                                        rel=1e-6)


class TestProblemRoundTrip:
    def test_system_documents_round_trip_through_parse(self, tmp_path):
        from ltvrobust.ltv import (
            partitioned_from_json,
            system_from_json,
        )

        sys = scalar_system(-1.0, 1.0, 1.0, 0.0, 1.0)
        plant = mild_uncertain_plant(T=2.0)
        doc = {
            "system": system_to_json(sys),
            "partitioned_system": partitioned_to_json(plant),
            "iqc": {"type": "unit_norm_lti", "v": 1, "p": 10},
            "performance": "l2",
            "config": {"tol": 5e-3},
        }
        # serialize -> parse -> serialize is the identity on every entry
        blob = json.dumps(doc, sort_keys=True)
        parsed = json.loads(blob)
        assert json.dumps(parsed, sort_keys=True) == blob
        assert system_to_json(system_from_json(parsed["system"])) == doc["system"]
        assert partitioned_to_json(
            partitioned_from_json(parsed["partitioned_system"])
        ) == doc["partitioned_system"]

    def test_jobs_flag(self, tmp_path):
        plant = mild_uncertain_plant(T=2.0)
        path = write_problem(tmp_path, "robust.json", {
            "partitioned_system": partitioned_to_json(plant),
            "iqc": {"type": "unit_norm_lti", "v": 0, "p": 1},
        })
        code = main(["robust", path, "--horizons", "1,2", "--jobs", "2"])
        assert code == 0


class TestDeterminism:
    def test_identical_runs_identical_outputs(self, tmp_path):
        plant = mild_uncertain_plant(T=2.0)
        path = write_problem(tmp_path, "robust.json", {
            "partitioned_system": partitioned_to_json(plant),
            "iqc": {"type": "unit_norm_lti", "v": 1, "p": 10},
        })
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{tag}.json"
            assert main(["robust", path, "--out", str(out)]) == 0
            doc = json.loads(out.read_text())
            for rec in doc["log"]["iterations"]:
                rec.pop("wall_time")
            outs.append(json.dumps(doc, sort_keys=True))
        assert outs[0] == outs[1]


class TestBench:
    def test_quick_bench_runs(self, tmp_path, capsys):
        out = str(tmp_path / "bench.json")
        code = main(["bench", "--study", "lti", "--quick", "--out", out])
        text = capsys.readouterr().out
        assert "[lti]" in text
        payload = json.loads(Path(out).read_text())
        assert "lti" in payload
        assert code in (0, 3)  # quick grids may not hit the full-accuracy checks
        assert payload["lti"]["checks"]["all_converged"]
