import json
import math
import subprocess
import sys

import pytest

from pamlab import cli
from pamlab.stats import tail_sum_check


def write(tmp_path, text, name="cfg.txt"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(cfg, out, *extra):
    return cli.main(["run", "--config", cfg, "--out", str(out), *extra])


def report(out, name="report.json"):
    return json.loads((out / name).read_text())


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_schedule_report(tmp_path):
    cfg = write(tmp_path, f"kind = schedule\nepsilon = {math.exp(-math.e ** math.e)!r}\nL_star = 2\n")
    assert run(cfg, tmp_path / "o") == 0
    res = report(tmp_path / "o")["result"]
    assert res["delta"] == pytest.approx(0.367879, abs=1e-6)
    assert abs(res["T1_minus_T0"] - res["delta"]) < 1e-12
    assert res["checks"] == {"T_increasing": True, "T1_minus_T0_is_delta": True}
    assert report(tmp_path / "o")["schema_version"] == cli.SCHEMA_VERSION


def test_tailsum_passes_through_bit_for_bit(tmp_path):
    cfg = write(tmp_path, "kind = tailsum\ndeltas = 0.05, 0.1, 0.2, 0.4\n")
    assert run(cfg, tmp_path / "o") == 0
    rows = report(tmp_path / "o")["result"]["rows"]
    for got, ref in zip(rows, tail_sum_check([0.05, 0.1, 0.2, 0.4])):
        assert got == vars(ref)
    lines = (tmp_path / "o" / "tailsum.csv").read_text().splitlines()[1:]
    for line, ref in zip(lines, tail_sum_check([0.05, 0.1, 0.2, 0.4])):
        assert float(line.split(",")[2]) == ref.ratio


PAM = "kind = pam\nmu = 0.5\nsigma = 1\nn = 16\ndt = 1e-3\ntrajectories = 70\nt_end = 0.2\n"


def test_same_seed_byte_identical_across_runs_and_workers(tmp_path):
    cfg = write(tmp_path, PAM)
    assert run(cfg, tmp_path / "a", "--seed", "0x2a") == 0
    assert run(cfg, tmp_path / "b", "--seed", "42", "--workers", "2") == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    assert run(cfg, tmp_path / "c", "--seed", "43") == 0
    assert tree(tmp_path / "a") != tree(tmp_path / "c")


def test_resolved_config_round_trip(tmp_path):
    cfg = write(tmp_path, PAM + "seed = 7\n")
    assert run(cfg, tmp_path / "a") == 0
    echoed = tmp_path / "a" / "config.resolved.txt"
    text = echoed.read_text()
    for key in cli.KIND_KEYS["pam"]:
        assert f"\n{key} = " in text
    assert run(str(echoed), tmp_path / "b") == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


def test_report_reaggregates_trajectories(tmp_path):
    cfg = write(tmp_path, "kind = lyapunov\nn = 16\ndt = 1e-3\ntrajectories = 5\nt_end = 1\n"
                          "window_start = 0.5\n")
    out = tmp_path / "o"
    assert run(cfg, out) == 0
    assert cli.main(["report", "--out", str(out)]) == 0
    assert report(out)["result"] == report(out, "report.reaggregated.json")["result"]


def test_couple_pair_and_staged_kinds(tmp_path):
    cfg = write(tmp_path, "kind = couple-pair\nn = 16\ndt = 1e-3\nt_end = 0.1\ntrajectories = 4\n")
    assert run(cfg, tmp_path / "p") == 0
    assert (tmp_path / "p" / "meetings.csv").read_text().startswith("trajectory,meeting_time\n")
    cfg = write(tmp_path, "kind = staged-coupling\npreset = linear\nsigma = 4\nn = 16\ndt = 5e-4\n"
                          "L_star = 1.01\nn_max = 2\ntrajectories = 2\n", "staged.txt")
    assert run(cfg, tmp_path / "s") == 0
    res = report(tmp_path / "s")["result"]
    assert res["median_log_ratio_sup"] == [0.0, 0.0, 0.0]
    assert (tmp_path / "s" / "events.csv").exists()


def test_validate_reports_both_sides(tmp_path, capsys):
    cfg = write(tmp_path, "kind = simulate\npreset = linear\nmu = 1\nsigma = 1\n")
    assert cli.main(["validate", "--config", cfg]) == 0
    rep = json.loads(capsys.readouterr().out)
    hn = next(c for c in rep["checks"] if c["check"] == "high_noise")
    assert not hn["ok"] and hn["sup_f_ratio"] == 1.0 and hn["threshold"] == 1 / 64


def test_validate_flags_epsilon_range(tmp_path, capsys):
    cfg = write(tmp_path, "kind = schedule\nepsilon = 0.1\n")
    assert cli.main(["validate", "--config", cfg]) == 0
    rep = json.loads(capsys.readouterr().out)
    eps = next(c for c in rep["checks"] if c["check"] == "epsilon_range")
    assert not eps["ok"] and not rep["ok"]


def test_validate_green_and_never_runs(tmp_path, capsys):
    cfg = write(tmp_path, "kind = staged-coupling\npreset = fisher_kpp\na = 0.001\nb = 1\n"
                          "sigma = 4\ntrajectories = 1000000\n")
    assert cli.main(["validate", "--config", cfg, "--out", str(tmp_path / "v")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["ok"] and all(c["ok"] for c in rep["checks"])
    assert sorted(p.name for p in (tmp_path / "v").iterdir()) == ["validate.json"]


def test_validate_cfl_for_explicit_scheme(tmp_path, capsys):
    cfg = write(tmp_path, "kind = pam\ntheta = 0\nn = 128\ndt = 1e-3\n")
    cli.main(["validate", "--config", cfg])
    rep = json.loads(capsys.readouterr().out)
    assert not next(c for c in rep["checks"] if c["check"] == "cfl")["ok"]


@pytest.mark.parametrize("text", [
    "kind = nope\n",
    "mu = 1\n",
    "kind = pam\nbogus = 1\n",
    "kind = pam\nmu = 1\nmu = 2\n",
    "kind = pam\nmu = abc\n",
    "kind = pam\njust text\n",
    "kind = schedule\npreset = linear\n",
    "kind = simulate\npreset = nope\n",
    "kind = schedule\nepsilon = 0.1\n",
    "kind = pam\nseed = -3\n",
])
def test_validation_errors_exit_2(tmp_path, text):
    cfg = write(tmp_path, text)
    assert run(cfg, tmp_path / "o") == cli.EXIT_VALIDATION
    err = report(tmp_path / "o", "error.json")
    assert err["status"] == "error" and err["exit_code"] == 2


def test_blowup_exits_3(tmp_path):
    cfg = write(tmp_path, "kind = simulate\npreset = linear\nmu = 50\nsigma = 0\nn = 8\ndt = 1e-3\n"
                          "blowup_cap = 1e3\ntrajectories = 1\n")
    assert run(cfg, tmp_path / "o") == cli.EXIT_NUMERIC
    err = report(tmp_path / "o", "error.json")
    assert err["error_type"] == "BlowupError" and 0.1 < err["time"] < 0.2


def test_positivity_loss_exits_4(tmp_path):
    cfg = write(tmp_path, "kind = oscillation\npreset = fisher_kpp\nsigma = 4\nn = 16\ndt = 5e-3\n"
                          "trajectories = 4\ntimes = 1\n")
    assert run(cfg, tmp_path / "o") == cli.EXIT_DEGENERACY
    assert report(tmp_path / "o", "error.json")["error_type"] == "PositivityError"


def test_missing_config_file(tmp_path):
    assert run(str(tmp_path / "missing.txt"), tmp_path / "o") == cli.EXIT_VALIDATION


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, "kind = tailsum\n")
    proc = subprocess.run([sys.executable, "-m", "pamlab", "run", "--config", cfg,
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert report(tmp_path / "o")["status"] == "ok"


def test_json_has_no_nan(tmp_path):
    cfg = write(tmp_path, "kind = schedule\nn_max = 3\n")
    assert run(cfg, tmp_path / "o") == 0
    text = (tmp_path / "o" / "report.json").read_text()
    assert "NaN" not in text and "null" in text  # eps_0 is undefined
