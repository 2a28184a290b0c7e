import json

import pytest

from fominlab import __version__
from fominlab.cli import main
from fominlab.config import DEFAULT_TOLERANCES, load_config
from fominlab.errors import ConfigError
from fominlab.experiments import REGISTRY
from fominlab.sde_engine import WORKERS_ENV

NAMES = ["hypothesis_check", "moments", "tail", "semigroup_identities", "bel_check", "small_t_scan",
         "invariant_sample", "fomin_suite", "cp_scan"]
SMALL_SAMPLE = {"n_samples": 2000}


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def strict_load(path):
    def bad(c):
        raise ValueError(f"non-standard JSON constant {c}")
    return json.loads(path.read_text(), parse_constant=bad)


def run(tmp_path, cfg, *flags, out="out"):
    status = main(["run", str(write(tmp_path, cfg)), "--output-dir", str(tmp_path / out), *flags])
    return status, tmp_path / out


def test_list_catalog(capsys):
    assert main(["list"]) == 0
    text = capsys.readouterr().out
    lines = [l for l in text.splitlines() if l.strip()]
    assert [l.split()[0] for l in lines] == NAMES
    assert all(len(l.split()) > 1 for l in lines)
    main(["list"])
    assert capsys.readouterr().out == text


def test_unknown_key_is_named(tmp_path, capsys):
    p = write(tmp_path, {"experiment": "moments", "model": {"name": "ou"}, "knobs": {"n_sampels": 10}})
    assert main(["run", str(p)]) == 2
    assert "n_sampels" in capsys.readouterr().err
    with pytest.raises(ConfigError, match="colour"):
        load_config(write(tmp_path, {"experiment": "tail", "colour": 1}, "b.json"), REGISTRY)


def test_unknown_experiment_and_model(tmp_path):
    assert main(["run", str(write(tmp_path, {"experiment": "nope"}))]) == 2
    assert run(tmp_path, {"experiment": "hypothesis_check", "model": {"name": "quartic"}})[0] == 2


def test_wrong_omega_fails(tmp_path):
    cfg = {"experiment": "hypothesis_check", "model": {"name": "ou", "params": {"omega": 2.0}}}
    status, out = run(tmp_path, cfg)
    assert status == 1
    rep = strict_load(out / "report.json")
    failing = [c for c in rep["checks"] if not c["pass"]]
    assert [c["name"] for c in failing] == ["dissipativity slack"]
    assert failing[0]["paper_anchor"] == "dissipativity condition"


def test_moments_report(tmp_path):
    # the absolute tolerances are sized for 10^5 samples
    cfg = {"experiment": "moments", "model": {"name": "ou"}, "knobs": SMALL_SAMPLE,
           "tolerances": {"moment_abs": [0.1, 0.3]}}
    status, out = run(tmp_path, cfg, "--n-paths", "2000", "--seed", "7")
    assert status == 0
    rep = strict_load(out / "report.json")
    assert {"experiment", "checks", "config", "seed", "version"} <= set(rep)
    assert rep["seed"] == 7 and rep["config"]["seed"] == 7
    assert rep["config"]["sim"]["n_paths"] == 2000
    assert rep["version"] == __version__
    assert rep["config"]["tolerances"] == {**DEFAULT_TOLERANCES, "moment_abs": [0.1, 0.3]}
    for c in rep["checks"]:
        assert {"name", "paper_anchor", "value", "std_error", "bound", "pass"} <= set(c)
    m1 = next(c for c in rep["checks"] if c["name"].startswith("E|X|^2m m=1 <="))
    assert m1["bound"] == pytest.approx(1.0) and m1["pass"]
    assert "wall_clock_seconds" in strict_load(out / "timing.json")


def test_report_bytes_are_reproducible(tmp_path, monkeypatch):
    cfg = {"experiment": "bel_check", "model": {"name": "double_well"},
           "sim": {"n_paths": 2000}, "knobs": {"eta_paths": 50, "times": [0.5]}}
    blobs = []
    for workers in ("1", "3"):
        monkeypatch.setenv(WORKERS_ENV, workers)
        run(tmp_path, cfg)
        blobs.append((tmp_path / "out" / "report.json").read_bytes())
    assert blobs[0] == blobs[1]


def test_embedded_config_reruns(tmp_path):
    cfg = {"experiment": "tail", "model": {"name": "rotated"}, "sim": {"n_paths": 3000},
           "knobs": {"cases": [[1.0, 0.5, 1.5]], "stationary": None}}
    _, out = run(tmp_path, cfg)
    first = strict_load(out / "report.json")
    again = write(tmp_path, first["config"], "again.json")
    main(["run", str(again)])
    second = strict_load(out / "report.json")
    assert second["checks"] == first["checks"]


def test_tolerance_override(tmp_path):
    cfg = {"experiment": "hypothesis_check", "model": {"name": "ou"},
           "tolerances": {"hypothesis_tol": 0.5}}
    status, out = run(tmp_path, cfg)
    rep = strict_load(out / "report.json")
    assert status == 0 and rep["config"]["tolerances"]["hypothesis_tol"] == 0.5


def test_invalid_overrides(tmp_path):
    p = write(tmp_path, {"experiment": "hypothesis_check"})
    assert main(["run", str(p), "--n-paths", "0"]) == 2
    assert main(["run", str(p), "--seed", "-1"]) == 2


def test_infinite_bounds_serialise_strictly(tmp_path):
    cfg = {"experiment": "invariant_sample", "model": {"name": "ou"}, "knobs": SMALL_SAMPLE,
           "sim": {"n_paths": 2000}}
    status, out = run(tmp_path, cfg)
    assert status == 0
    strict_load(out / "report.json")
    header = (out / "samples.csv").read_text().splitlines()[0]
    assert header == "weight,x_1"


def test_divergence_exit_status(tmp_path):
    cfg = {"experiment": "tail", "model": {"name": "double_well"},
           "sim": {"dt": 0.5, "n_paths": 20, "scheme": "euler_maruyama"},
           "knobs": {"cases": [[10.0, 5.0, 1.0]], "stationary": None}}
    status, out = run(tmp_path, cfg)
    rep = strict_load(out / "report.json")
    assert status == 2 and rep["passed"] is False and "tail" in rep["error"]


@pytest.mark.parametrize("name", NAMES)
def test_shipped_configs_parse(name):
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "scripts" / "configs" / f"ou_{name}.json"
    cfg = load_config(path, REGISTRY)
    assert cfg.experiment == name
