import json

import numpy as np
import pytest

from fedldi.datasets import gen_synthetic, partition_iid, partition_quantity
from fedldi.errors import ConfigError, StageError
from fedldi.flsim import ClientState, UploadRecord, run_federation
from fedldi.harness.baselines import baseline_lastlayer, baseline_uniform
from fedldi.harness.cli import main
from fedldi.harness.config import (FLRunConfig, config_from_dict, config_hash,
                                   parse_config, replace, write_config)
from fedldi.harness.pipeline import ExperimentReport, run_dp_sweep, run_experiment
from fedldi.harness.plotdata import emit_plotdata
from fedldi.metrics import distance_report, l1
from fedldi.numerics.mlp import init_mlp
from fedldi.numerics.rng import RngStream

MINI = {
    "dataset": {"n_classes": 4, "dim": 6, "per_class": 700, "sep": 5.0},
    "model": {"hidden": [8]},
    "rounds": 4,
    "victim": {"size": 200, "regime": {"kind": "dirichlet", "alpha": 1.0}},
    "clients": {"count": 3, "size": 200},
    "server": {"eval_per_class": 25},
    "size_search": {"s_init": 100, "s_max": 1600, "probe_repeats": 2},
    "cluster": {"train": {"iid": 4, "dirichlet": 6}, "test": {"dirichlet": 4}},
    "attacker": {"epochs": 5, "hidden": 8},
}


def _write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


# -- config ----------------------------------------------------------------------------

def test_minimal_config_defaults_and_roundtrip(tmp_path):
    cfg = parse_config(_write(tmp_path, {"dataset": {"source": "synthetic"}, "rounds": 5}))
    assert cfg.rounds == 5 and cfg.clients.count == 4 and cfg.victim.size == 2000
    write_config(cfg, tmp_path / "echo.json")
    again = parse_config(tmp_path / "echo.json")
    assert again == cfg and config_hash(again) == config_hash(cfg)


def test_negative_alpha_names_key_path(tmp_path):
    data = {"victim": {"regime": {"kind": "dirichlet", "alpha": -1}}}
    with pytest.raises(ConfigError) as info:
        parse_config(_write(tmp_path, data))
    assert info.value.path == "victim.regime.alpha"


def test_duplicate_key_rejected(tmp_path):
    path = tmp_path / "dup.json"
    path.write_text('{"rounds": 3, "rounds": 4}')
    with pytest.raises(ConfigError):
        parse_config(path)


@pytest.mark.parametrize("data,key", [
    ({"roundz": 3}, "roundz"),
    ({"rounds": "3"}, "rounds"),
    ({"rounds": 0}, "rounds"),
    ({"rounds": 2.5}, "rounds"),
    ({"ldp": {"epsilon": 0}}, "ldp.epsilon"),
    ({"victim": {"regime": {"kind": "zipf"}}}, "victim.regime.kind"),
    ({"victim": {"regime": {"kind": "iid", "alpha": 1.0}}}, "victim.regime.alpha"),
    ({"cluster": {"train": {"iid": -1}}}, "cluster.train.iid"),
    ({"dataset": {"source": "idx", "images": "/nonexistent/a", "labels": "/nonexistent/b"}},
     "dataset.images"),
    ({"attacker": {"loss": "hinge"}}, "attacker.loss"),
    ({"model": {"hidden": [0]}}, "model.hidden[0]"),
])
def test_config_errors_carry_path(data, key):
    with pytest.raises(ConfigError) as info:
        config_from_dict(data)
    assert info.value.path == key


def test_config_unreadable(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{rounds: 3")
    with pytest.raises(ConfigError):
        parse_config(bad)


def test_replace_dotted():
    cfg = replace(FLRunConfig(), **{"ldp.epsilon": 2.0, "seed": 9})
    assert cfg.ldp.epsilon == 2.0 and cfg.seed == 9 and cfg.ldp.delta == 1e-5


# -- baselines ----------------------------------------------------------------------------

def test_uniform_baseline():
    assert baseline_uniform(4).p.tolist() == [0.25] * 4
    for C in (2, 5, 10):
        onehot = np.eye(C)[0]
        assert l1(baseline_uniform(C), onehot) == pytest.approx(2 * (C - 1) / C, abs=1e-12)
        assert baseline_uniform(C).p.sum() == pytest.approx(1.0, abs=1e-15)


def test_lastlayer_constant_uploads_uniform():
    model = init_mlp((3, 4, 5), rng=0)
    ups = [UploadRecord(t, 0, model.params.copy(),
                        model.params.with_values(np.zeros(len(model.params))), 0.0, 5)
           for t in (1, 2)]
    out = baseline_lastlayer(ups, [model.params, model.params])
    assert out.p.tolist() == [0.2] * 5


def test_lastlayer_finds_single_class_victim():
    pool = gen_synthetic(10, 16, 600, 5.0, RngStream(0))
    hits = 0
    for seed in range(10):
        rs = RngStream(seed)
        victim, dist = partition_quantity(pool, 300, 1, rs.child("v"))
        others = [partition_iid(pool, 300, 0.1, rs.child("o", i))[0] for i in range(3)]
        clients = [ClientState(0, victim, seed=seed)] + [
            ClientState(i + 1, ds, seed=100 + i) for i, ds in enumerate(others)]
        model = init_mlp((16, 16, 10), rng=seed)
        hist = run_federation(model, clients, 10, seed=seed)
        out = baseline_lastlayer(hist.uploads_of(0), hist)
        assert out.p.sum() == pytest.approx(1.0, abs=1e-12)
        hits += int(np.argmax(out.p) == np.argmax(dist.p))
    assert hits >= 7


# -- pipeline -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mini_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_experiment(config_from_dict(MINI), out), out


def test_pipeline_artifacts(mini_report):
    report, out = mini_report
    for name in ("report.json", "search_trace.json", "labels.json", "cluster.json",
                 "attacker.ckpt", "history.jsonl", "config.json", "victim_temporal.csv"):
        assert (out / name).exists(), name
    assert len(list((out / "temporal").glob("*.csv"))) == 14
    assert report.metadata["stages"][-1] == "evaluation"
    assert report.config_hash == config_hash(config_from_dict(MINI))


def test_report_integrity(mini_report):
    report, out = mini_report
    data = json.loads((out / "report.json").read_text())
    v = data["victim"]
    assert distance_report(v["true"], v["predicted"]).to_dict() == v["distances"]
    for name, entry in v["baselines"].items():
        assert distance_report(v["true"], entry["predicted"]).to_dict() == entry["distances"]
    for c in data["heldout"]["clients"]:
        assert distance_report(c["true"], c["predicted"]).to_dict() == c["distances"]
    assert data["config_hash"] == config_hash(config_from_dict(data["config"]))


def test_pipeline_deterministic(mini_report, tmp_path):
    report, out = mini_report
    again = run_experiment(config_from_dict(MINI), tmp_path)
    a, b = report.to_dict(), again.to_dict()
    a["metadata"].pop("wall_time_s")
    b["metadata"].pop("wall_time_s")
    assert a == b
    for name in ("labels.json", "search_trace.json", "victim_temporal.csv"):
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes()


def test_cluster_stage_isolation(mini_report, tmp_path):
    report, _ = mini_report
    short = run_experiment(config_from_dict(MINI), tmp_path, skip=("cluster",))
    assert short.federation == report.federation
    assert short.cluster is None and short.heldout is None


def test_stage_error_tagged(tmp_path):
    bad = dict(MINI, victim={"size": 5000})  # larger than the federation pool
    with pytest.raises(StageError) as info:
        run_experiment(config_from_dict(bad), tmp_path)
    assert info.value.stage == "federation"
    assert (tmp_path / "report.json").exists()


def test_plotdata(mini_report, tmp_path):
    report, _ = mini_report
    emit_plotdata([report], tmp_path)
    lines = (tmp_path / "dist_lines.csv").read_text().splitlines()
    assert lines[0] == "run,class,true,predicted,uniform,lastlayer"
    assert len(lines) == 1 + 4
    true = [float(line.split(",")[2]) for line in lines[1:]]
    assert abs(sum(true) - 1) < 1e-9
    first = (tmp_path / "dist_lines.csv").read_bytes(), (tmp_path / "dp_sweep.csv").read_bytes()
    emit_plotdata([report], tmp_path)
    assert first == ((tmp_path / "dist_lines.csv").read_bytes(),
                     (tmp_path / "dp_sweep.csv").read_bytes())
    with pytest.raises(ValueError):
        emit_plotdata([], tmp_path)


def test_report_json_roundtrip(mini_report):
    report, out = mini_report
    back = ExperimentReport.read(out / "report.json")
    assert back.to_dict() == json.loads((out / "report.json").read_text())


def test_dp_sweep_small(tmp_path):
    cfg = config_from_dict(dict(MINI, size_search={"enabled": False}))
    reports = run_dp_sweep(cfg, [40.0, 1.0], tmp_path)
    assert [r.config["ldp"]["epsilon"] for r in reports] == [40.0, 1.0]
    rows = (tmp_path / "dp_sweep.csv").read_text().splitlines()
    assert rows[0] == "epsilon,l1,js,kl,wasserstein,accuracy" and len(rows) == 3
    assert (tmp_path / "sweep.json").exists()


# -- CLI -------------------------------------------------------------------------------------

def test_cli_stages_and_determinism(tmp_path, capsys):
    cfg = _write(tmp_path, MINI)
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "b")]) == 0

    def strip(p):
        d = json.loads(p.read_text())
        d["metadata"].pop("wall_time_s")
        return d

    assert strip(tmp_path / "a" / "report.json") == strip(tmp_path / "b" / "report.json")
    assert main(["simulate", str(cfg), "--seed", "3", "--out", str(tmp_path / "c")]) == 0
    assert strip(tmp_path / "c" / "report.json")["config"]["seed"] == 3
    assert main(["estimate-size", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert "size_estimate" in strip(tmp_path / "d" / "report.json")


def test_cli_infer_from_checkpoint(mini_report, tmp_path, capsys):
    _, out = mini_report
    rc = main(["infer", "unused.json", "--model", str(out / "attacker.ckpt"),
               "--matrix", str(out / "victim_temporal.csv"), "--out", str(tmp_path)])
    assert rc == 0
    pred = json.loads((tmp_path / "report.json").read_text())["predicted"]
    assert len(pred) == 4 and abs(sum(pred) - 1) < 1e-12


def test_cli_report_from_existing(mini_report, tmp_path):
    _, out = mini_report
    assert main(["report", "--from", str(out / "report.json"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "dist_lines.csv").exists()


def test_cli_config_error_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path, {"rounds": -1})
    assert main(["simulate", str(cfg)]) == 2
    assert "rounds" in capsys.readouterr().err


def test_default_output_root_env(tmp_path, monkeypatch):
    from fedldi.harness.pipeline import default_output_dir
    monkeypatch.setenv("FEDLDI_OUTPUT_ROOT", str(tmp_path))
    cfg = config_from_dict({})
    assert default_output_dir(cfg).parent == tmp_path
    assert default_output_dir(replace(cfg, output_dir="x")).name == "x"


@pytest.mark.slow
def test_one_hot_victim_desk_defaults(tmp_path):
    # a single-class victim is out of reach of IID size probes, so the cluster is sized
    # by the truth; 1000 samples leave enough of that class for the other clients
    cfg = config_from_dict({"victim": {"size": 1000, "regime": {"kind": "quantity", "c_f": 1}},
                            "size_search": {"enabled": False}})
    report = run_experiment(cfg, tmp_path)
    v = report.victim
    assert np.argmax(v["predicted"]) == np.argmax(v["true"])
