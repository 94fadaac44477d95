import json
from pathlib import Path

import pytest

from stablemix import cli, io
from stablemix.errors import ConfigError, NumericalError

OU = {"kind": "heat", "K": 1, "drift": {"family": "tanh", "sup_norm": 1.0}}

SMALL = {
    "noise_selftest": {"N": 2000},
    "trajectory": {"T": 0.2},
    "kernel": {"N": 2000},
    "gradient_probe": {"N": 2000, "times": [0.05, 0.1]},
    "irreducibility": {"N": 2000},
    "coupling": {"n_runs": 20, "max_steps": 50, "N_kernel": 500, "N_probe": 1000},
    "harris": {"N": 1000, "n_pairs": 2, "N_kernel": 5000},
    "mixing": {"N": 5000, "n_times": 6},
}

OUTPUTS = {
    "noise_selftest": {"noise_selftest.csv"},
    "trajectory": {"trajectory.csv"},
    "kernel": {"kernel.json", "kernel.csv"},
    "gradient_probe": {"gradient_probe.csv", "gradient_fit.json"},
    "irreducibility": {"irreducibility.json"},
    "coupling": {"coupled_runs.jsonl", "coupling_summary.json"},
    "harris": {"harris_report.json"},
    "mixing": {"mixing_curve.csv", "mixing_fit.json"},
}


def write_cfg(tmp_path, name, model=OU, **extra):
    cfg = {"model": model, "experiment": {"name": name, **SMALL.get(name, {}), **extra}}
    p = tmp_path / f"{name}.json"
    p.write_text(json.dumps(cfg))
    return p


def manifest(out):
    return json.loads((Path(out) / "manifest.json").read_text())


class TestConfig:
    def test_minimal_defaults_echoed(self):
        cfg = cli.validate_config({"model": {"kind": "heat"}})
        m = cfg.data["model"]
        assert (m["d"], m["alpha"], m["theta"], m["eps"], m["K"], m["dt"]) == (1, 1.5, 0.5, 0.1, 64, 0.01)
        assert m["drift"]["family"] == "tanh"
        assert cfg.data["experiment"]["name"] == "trajectory" and "T" in cfg.data["experiment"]
        assert cfg.data["run"] == {"seed": 0, "workers": 1, "out": "out"}
        assert {"lower", "upper", "bins"} <= set(cfg.data["grid"])
        # the effective config validates to itself
        assert cli.validate_config(cfg.data).data == cfg.data

    def test_alpha_out_of_range(self):
        with pytest.raises(ConfigError, match="stable index out of range") as exc:
            cli.validate_config({"model": {"kind": "heat", "alpha": 2.5}})
        assert exc.value.path == "model.alpha"

    def test_heat_example_accepted(self):
        cfg = cli.validate_config({"model": {"kind": "heat", "d": 1, "alpha": 1.5, "theta": 0.5, "eps": 0.1,
                                             "K": 64}})
        assert cfg.model.K == 64

    def test_admissibility_violation(self):
        with pytest.raises(ConfigError, match=r"2\*alpha\*\(theta-eps\) > d violated"):
            cli.validate_config({"model": {"kind": "heat", "theta": 0.2}})

    @pytest.mark.parametrize("raw,path", [
        ({"model": {"kind": "heat", "foo": 1}}, "model.foo"),
        ({"model": {"kind": "blob"}}, "model.kind"),
        ({"model": {"kind": "matrix"}}, "model.A"),
        ({"model": {"kind": "heat"}, "run": {"seed": -1}}, "run.seed"),
        ({"model": {"kind": "heat"}, "experiment": {"name": "kernel", "N": "many"}}, "experiment.N"),
        ({"model": {"kind": "heat"}, "experiment": {"name": "harris", "p": 1.5}}, "experiment.p"),
        ({"model": {"kind": "heat"}, "grid": {"lower": [0.0]}}, "grid"),
    ])
    def test_errors_name_the_field(self, raw, path):
        with pytest.raises(ConfigError) as exc:
            cli.validate_config(raw)
        assert exc.value.path == path
        assert str(exc.value).startswith(path)

    def test_matrix_defaults(self):
        cfg = cli.validate_config({"model": {"kind": "matrix", "A": [[-1, 0.5], [0, -2]]}})
        assert cfg.data["model"]["drift"]["family"] == "holder"
        # the echoed measure is the symmetrised axis measure
        dirs = cfg.data["model"]["spectral"]["directions"]
        assert sorted(map(tuple, dirs)) == [(-1.0, 0.0), (0.0, -1.0), (0.0, 1.0), (1.0, 0.0)]

    def test_experiment_mismatch(self, tmp_path):
        p = write_cfg(tmp_path, "kernel")
        with pytest.raises(ConfigError, match="was requested"):
            cli.load_config(p, "mixing")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            cli.load_config(tmp_path / "nope.json")


@pytest.mark.parametrize("name", list(cli.EXPERIMENTS))
def test_each_experiment_writes_listed_files(tmp_path, name):
    out = tmp_path / "out"
    code = cli.main([name, "--config", str(write_cfg(tmp_path, name)), "--out", str(out), "--seed", "5"])
    assert code in ((0, 4) if name == "harris" else (0,))
    man = manifest(out)
    names = {f["name"] for f in man["files"]}
    assert names == OUTPUTS[name]
    on_disk = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert on_disk == names
    for f in man["files"]:
        assert f["sha256"] == io.sha256(out / f["name"])
    assert man["seed"] == 5 and man["config"]["run"]["seed"] == 5
    assert {"version", "started", "finished", "status", "resampled_draws"} <= set(man)


class TestReproducibility:
    def test_repeat_workers_and_replay(self, tmp_path):
        cfg = write_cfg(tmp_path, "mixing", N=20_000, n_times=8)
        runs = {}
        for tag, w in (("a", 1), ("b", 1), ("c", 3)):
            assert cli.main(["mixing", "--config", str(cfg), "--out", str(tmp_path / tag), "--workers", str(w)]) == 0
            runs[tag] = manifest(tmp_path / tag)
        assert cli.main(["replay", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "r"),
                         "--workers", "2"]) == 0
        runs["r"] = manifest(tmp_path / "r")
        ref = runs["a"]["files"]
        assert all(m["files"] == ref for m in runs.values())
        fit = json.loads((tmp_path / "a" / "mixing_fit.json").read_text())
        assert fit["c_hat"] > 0

    def test_seed_changes_output(self, tmp_path):
        cfg = write_cfg(tmp_path, "kernel")
        cli.main(["kernel", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "1"])
        cli.main(["kernel", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "2"])
        assert manifest(tmp_path / "a")["files"] != manifest(tmp_path / "b")["files"]


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"model": {"kind": "heat", "alpha": 2.5}}))
        assert cli.main(["kernel", "--config", str(p), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
        assert "model.alpha" in capsys.readouterr().err

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{model:")
        assert cli.main(["kernel", "--config", str(p)]) == cli.EXIT_CONFIG

    def test_numeric_failure(self, tmp_path):
        model = {"kind": "matrix", "A": [[-1e6, 0], [0, -1]], "scheme": "euler", "drift": {"family": "zero"}}
        p = write_cfg(tmp_path, "trajectory", model=model, T=10.0)
        out = tmp_path / "o"
        assert cli.main(["trajectory", "--config", str(p), "--out", str(out)]) == cli.EXIT_NUMERIC
        assert not any(out.iterdir())

    def test_partial_outputs_removed(self, tmp_path, monkeypatch):
        def half(cfg, e, rng, out, workers, files):
            files.append(cli._csv(out, "mixing_curve.csv", ["t"], [(0.1,)]))
            raise NumericalError("boom", step=3)

        monkeypatch.setitem(cli._DISPATCH, "mixing", half)
        out = tmp_path / "o"
        assert cli.main(["mixing", "--config", str(write_cfg(tmp_path, "mixing")), "--out", str(out)]) == 3
        assert list(out.iterdir()) == []

    @pytest.mark.parametrize("verdict,code", [("certified", 0), ("failed", 0), ("inconclusive", 4)])
    def test_harris_verdicts(self, tmp_path, monkeypatch, verdict, code):
        monkeypatch.setitem(cli._DISPATCH, "harris", lambda *a: verdict)
        p = write_cfg(tmp_path, "harris")
        assert cli.main(["harris", "--config", str(p), "--out", str(tmp_path / "o")]) == code

    def test_bad_workers(self, tmp_path):
        p = write_cfg(tmp_path, "kernel")
        assert cli.main(["kernel", "--config", str(p), "--workers", "0"]) == cli.EXIT_CONFIG
