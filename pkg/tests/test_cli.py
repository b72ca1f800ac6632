import csv
import json

import pytest

from kyleback.cli import config_hash, load_config, main


def write(path, text):
    path.write_text(text)
    return str(path)


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_hash: ") and lines[1].startswith("# seed: ")
    return list(csv.DictReader(lines[2:]))


def test_validate_default_exits_zero(tmp_path, capsys):
    assert main(["validate", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "validate.json").read_text())
    assert report["overall"] and report["config_hash"]
    assert "overall: PASS" in capsys.readouterr().out


def test_validate_quadratic_large_delta_exits_one(tmp_path):
    cfg = write(tmp_path / "c.toml", '[model]\nkind = "quadratic"\ndelta = 1.5\n')
    assert main(["validate", "--config", cfg, "--out", str(tmp_path)]) == 1


def test_validate_tampered_rule_exits_one(tmp_path):
    cfg = write(tmp_path / "c.toml", '[rule]\nkind = "constant"\nvalue = 1.0\n')
    assert main(["validate", "--config", cfg, "--out", str(tmp_path)]) == 1


@pytest.mark.parametrize("text", ["[model\nkind=", "[model]\nfoo = 1\n", "[nonsense]\nx = 1\n",
                                  '[model]\nkind = "deterministic"\ndelta = 0.5\n', '[model]\nkind = "cubic"\n',
                                  '[rule]\nkind = "linear"\n', '[model]\ngamma = "x"\n'])
def test_bad_config_exits_two(tmp_path, text):
    cfg = write(tmp_path / "c.toml", text)
    assert main(["validate", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_missing_config_and_bad_flags_exit_two(tmp_path):
    assert main(["validate", "--config", str(tmp_path / "none.toml")]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["verify", "--only", "nonsense", "--out", str(tmp_path)]) == 2
    assert main(["validate", "--seed", "-3", "--out", str(tmp_path)]) == 2


def test_config_hash_ignores_output_dir():
    a, b = load_config(None), load_config(None)
    b["output"]["dir"] = "elsewhere"
    assert config_hash(a) == config_hash(b)
    b["sim"]["seed"] = 9
    assert config_hash(a) != config_hash(b)


def test_simulate_summary_and_dump(tmp_path):
    args = ["simulate", "--paths", "1000", "--steps", "1024", "--epsilon", str(2.0 ** -10)]
    assert main(args + ["--out", str(tmp_path / "a"), "--dump-paths", "3"]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    first = (tmp_path / "a" / "summary.csv").read_bytes()
    assert first == (tmp_path / "b" / "summary.csv").read_bytes()
    rows = read_csv(tmp_path / "a" / "summary.csv")
    mid = min(rows, key=lambda r: abs(float(r["t"]) - 0.5))
    assert abs(float(mid["xi_mean"])) < 3 * float(mid["xi_se"])
    dumped = sorted((tmp_path / "a" / "paths" / "equilibrium").glob("path_*.csv"))
    assert len(dumped) == 3
    path_rows = read_csv(dumped[0])
    assert list(path_rows[0]) == ["t", "B", "Z", "xi", "Y", "theta"] and len(path_rows) == 1024


def test_density_outputs_and_rejects_equal_times(tmp_path):
    assert main(["density", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "density_rho.csv")
    assert list(rows[0]) == ["s", "x", "t", "y", "value"]
    assert len(rows) == 3 * 3 * 41
    assert main(["density", "--s", "0.5", "--t", "0.5", "--out", str(tmp_path)]) == 2


def test_density_row_sums(tmp_path):
    assert main(["density", "--s", "0.2", "--t", "0.6", "--range", "-4", "4", "--points", "801",
                 "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "density_rho.csv")
    for x in ("-1.0", "0.0", "1.0"):
        vals = [float(r["value"]) for r in rows if r["x"] == x]
        assert abs(sum(vals) * 0.01 - 1.0) < 1e-6


def test_verify_only_subset(tmp_path):
    assert main(["verify", "--only", "density", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert {e["name"].split("_")[0] for e in report["entries"]} == {"density"}


def test_verify_tampered_rule_exits_one(tmp_path):
    cfg = write(tmp_path / "c.toml", '[rule]\nkind = "constant"\nvalue = 1.0\n')
    assert main(["verify", "--config", cfg, "--only", "assumptions", "--out", str(tmp_path)]) == 1


def test_sweep_empty_exits_two(tmp_path):
    cfg = write(tmp_path / "c.toml", "[sweep]\nvalues = []\n")
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_sweep_rows_and_infeasible_value(tmp_path):
    cfg = write(tmp_path / "c.toml", '[sweep]\nparameter = "q"\nvalues = [0.01, 0.0]\n')
    code = main(["sweep", "--config", cfg, "--only", "density", "--out", str(tmp_path)])
    assert code == 1
    rows = read_csv(tmp_path / "sweep.csv")
    assert [r["q"] for r in rows] == ["0.01", "0.0"]
    assert rows[0]["valid"] == "True" and "AssumptionViolation" in rows[1]["error"]
