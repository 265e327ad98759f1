import json

import pytest

from smab import engine
from smab.cli import main
from smab.policies import BasePolicy


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def we_file(tmp_path, capsys):
    path = tmp_path / "we.json"
    assert run_cli(capsys, "scenario", "emit", "worked-example", "--out", str(path), "--param", "sigma=0.5")[0] == 0
    return path


class TestSpecCommands:
    def test_validate(self, capsys, we_file):
        code, out, _ = run_cli(capsys, "validate", str(we_file))
        assert code == 0 and "valid" in out

    def test_validate_reports_location(self, capsys, we_file, tmp_path):
        doc = json.loads(we_file.read_text())
        doc["feedback_dist"]["1"]["∅"]["a"] = [0.5, 0.6]
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        code, _, err = run_cli(capsys, "validate", str(bad))
        assert code == 2 and "(1, '∅', 'a')" in err

    def test_missing_file(self, capsys, tmp_path):
        assert run_cli(capsys, "validate", str(tmp_path / "nope.json"))[0] == 2
        assert run_cli(capsys, "bounds", "--env", str(tmp_path / "nope.json"), "--sigma", "1", "--delta", "0.1")[0] == 2

    def test_gains(self, capsys):
        code, out, _ = run_cli(capsys, "gains", "--scenario", "worked-example")
        assert code == 0
        assert json.loads(out)["benchmark_value"] == pytest.approx(9.2)

    def test_bounds(self, capsys, we_file):
        code, out, _ = run_cli(capsys, "bounds", "--env", str(we_file), "--sigma", "0.5", "--delta", "0.05")
        assert code == 0 and "thm1:" in out and "assumption 2" in out

    def test_bounds_warning_is_not_an_error(self, capsys, tmp_path):
        code, out, err = run_cli(capsys, "bounds", "--scenario", "submodular", "--param", 'priors={"i3": 0.0}',
                                 "--sigma", "1", "--delta", "0.1", "--json")
        assert code == 0
        assert "assumption_2_satisfied" in json.loads(out)

    def test_enumerate_fixed(self, capsys):
        code, out, _ = run_cli(capsys, "enumerate-fixed", "--scenario", "worked-example", "--top", "1")
        assert code == 0
        assert out.splitlines()[0].split() == ["(a,b)", "9.1"]
        assert out.splitlines()[-1].split() == ["benchmark", "9.2"]

    def test_emit_to_stdout(self, capsys):
        code, out, _ = run_cli(capsys, "scenario", "emit", "random", "--seed", "3")
        assert code == 0 and json.loads(out)["l_max"] >= 2


class TestRun:
    def test_row_count_and_determinism(self, capsys, tmp_path):
        paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for p in paths:
            code, out, _ = run_cli(capsys, "run", "--scenario", "worked-example", "--policy", "fal",
                                   "--n", "300", "--reps", "4", "--seed", "7", "--csv", str(p))
            assert code == 0 and "thm1" in out
        assert paths[0].read_bytes() == paths[1].read_bytes()
        assert len(paths[0].read_text().splitlines()) == 1 + 4 * 300

    def test_seed_is_required(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["run", "--scenario", "worked-example", "--n", "10"])
        assert exc.value.code == 2

    def test_config_file_and_override(self, capsys, tmp_path):
        cfg = {"env": {"scenario": "worked-example"}, "policy": {"name": "fal", "delta": 0.2},
               "horizon": 100, "replications": 2}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        out_json = tmp_path / "s.json"
        code, _, _ = run_cli(capsys, "run", "--config", str(path), "--seed", "1", "--n", "50",
                             "--delta-mode", "one-over-n", "--json", str(out_json))
        assert code == 0
        doc = json.loads(out_json.read_text())
        assert doc["config"]["horizon"] == 50
        assert doc["config"]["policy"]["delta_mode"] == "one-over-n"
        assert doc["bounds"]["delta"] == pytest.approx(1 / 50)

    def test_malformed_config(self, capsys, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"horizon": ')
        code, _, err = run_cli(capsys, "run", "--config", str(path), "--seed", "1")
        assert code == 2 and "line 1" in err
        path.write_text('{"horizon": 5, "bogus": 1}')
        assert run_cli(capsys, "run", "--config", str(path), "--seed", "1", "--scenario", "worked-example")[0] == 2

    def test_bad_checkpoint(self, capsys):
        code = run_cli(capsys, "run", "--scenario", "worked-example", "--n", "10", "--seed", "1",
                       "--checkpoints", "11")[0]
        assert code == 2

    def test_audit_output(self, capsys, tmp_path):
        out_json = tmp_path / "s.json"
        code, out, _ = run_cli(capsys, "run", "--scenario", "worked-example", "--n", "100", "--reps", "2",
                               "--seed", "1", "--audit", "--json", str(out_json))
        assert code == 0 and "E_conf" in out
        assert "confidence_audit" in json.loads(out_json.read_text())

    def test_invariant_violation_exits_3(self, capsys, monkeypatch):
        class Rogue(BasePolicy):
            def select(self, t, x):
                return "teleport"

        monkeypatch.setattr(engine, "make_policy", lambda *a, **k: Rogue())
        code, _, err = run_cli(capsys, "run", "--scenario", "worked-example", "--n", "5", "--seed", "1")
        assert code == 3 and "teleport" in err

    def test_screening_run(self, capsys):
        code, out, _ = run_cli(capsys, "run", "--scenario", "screening", "--policy", "cbb", "--n", "100",
                               "--seed", "2")
        assert code == 0 and "n/a" in out

    def test_help_lists_commands(self, capsys):
        with pytest.raises(SystemExit):
            main(["--help"])
        out = capsys.readouterr().out
        for cmd in ("validate", "gains", "run", "bounds", "enumerate-fixed", "scenario"):
            assert cmd in out
