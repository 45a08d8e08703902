import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from mheglm.cli import config as CF
from mheglm.cli import data as D
from mheglm.cli import main as M
from mheglm.cli.metrics import classification, regression
from mheglm.errors import IngestionError, ParameterError

ROOT = Path(__file__).resolve().parents[1]


# --- configuration and validation

@pytest.mark.parametrize("name", ["SP1", "SP2", "DESK"])
def test_presets_validate(name):
    cfg = CF.preset(name)
    fatal = [d for d in CF.validate_params(cfg, 10) if d.fatal]
    assert fatal == []


def test_desk_preset_warns_about_security():
    diags = CF.check(CF.preset("DESK"), 10)
    assert [d.name for d in diags] == ["security"]


def _mutate(name, **changes):
    cfg = CF.preset(name)
    for path, v in changes.items():
        obj, attr = path.split("__")
        setattr(getattr(cfg, obj), attr, v)
    return cfg


@pytest.mark.parametrize("changes,diag", [
    ({"crypto__log_n": 9}, "ring_degree"),
    ({"crypto__log_q": 500}, "security"),
    ({"crypto__delta_bits": 52}, "delta_precision"),
    ({"crypto__tau_b": 0}, "levels"),
    ({"crypto__levels": 2}, "level_budget"),
    ({"learning__strategy": "HB", "learning__local_iters": 5}, "level_budget"),
    ({"learning__packing": "rba"}, "level_budget"),
    ({"learning__alpha": 2.0 ** -40}, "representable"),
    ({"learning__rho": -1.0}, "learning_rate"),
    ({"crypto__lam": 120}, "mask_headroom"),
])
def test_mutations_rejected_with_named_diagnostic(changes, diag):
    cfg = _mutate("SP2", **changes)
    with pytest.raises(ParameterError) as ei:
        CF.check(cfg, 10)
    assert diag in {d.name for d in ei.value.diagnostics}


def test_slots_diagnostic():
    cfg = _mutate("DESK", crypto__log_n=10)
    cfg.crypto.enforce_security = False
    with pytest.raises(ParameterError) as ei:
        CF.check(cfg, 1000)
    assert "slots" in {d.name for d in ei.value.diagnostics}


def test_config_roundtrip_and_unknown_keys(tmp_path):
    cfg = CF.preset("SP1")
    CF.dump_config(cfg, tmp_path / "c.yaml")
    assert CF.load_config(tmp_path / "c.yaml").as_dict() == cfg.as_dict()
    with pytest.raises(ParameterError):
        CF.RunConfig.from_dict({"crypto": {"log_m": 3}})
    with pytest.raises(ParameterError):
        CF.RunConfig.from_dict({"extras": {}})


# --- ingestion

def write_csv(path, header, rows):
    path.write_text("\n".join([",".join(header)] + [",".join(map(str, r)) for r in rows]) + "\n")
    return path


def test_toy_csv_split_two_by_two(tmp_path):
    p = write_csv(tmp_path / "t.csv", ["a", "b", "label"], [[1, 2, 0], [3, 4, 1], [5, 6, 0], [7, 8, 1]])
    X, y, names = D.load_csv(p)
    assert names == ["a", "b"]
    parts = D.split(X, y, 2)
    assert [p.n for p in parts] == [2, 2]
    assert parts[1].X.tolist() == [[5, 6], [7, 8]]


def test_bcw_ten_parties():
    X, y, names = D.load_csv(ROOT / "data" / "bcw.csv")
    assert X.shape == (699, 9)
    sizes = sorted(p.n for p in D.split(X, y, 10))
    assert sizes == [69] + [70] * 9


def test_proportional_split(tmp_path):
    X = np.arange(20.0)[:, None]
    parts = D.split(X, np.zeros(20), 3, "proportional", (0.5, 0.25, 0.25))
    assert [p.n for p in parts] == [10, 5, 5]
    with pytest.raises(IngestionError):
        D.split(X, np.zeros(20), 3, "proportional", (1, 1))


def test_missing_label(tmp_path):
    p = write_csv(tmp_path / "t.csv", ["a", "b"], [[1, 2]])
    with pytest.raises(IngestionError, match="label"):
        D.load_csv(p)


def test_ragged_row_reports_index(tmp_path):
    p = write_csv(tmp_path / "t.csv", ["a", "label"], [[1, 0], [2], [3, 1]])
    with pytest.raises(IngestionError, match="row 2"):
        D.load_csv(p)


def test_non_numeric_row_reports_index(tmp_path):
    p = write_csv(tmp_path / "t.csv", ["a", "label"], [[1, 0], [2, 1], ["x", 1]])
    with pytest.raises(IngestionError, match="row 3"):
        D.load_csv(p)


def test_kfold_partitions_rows():
    folds = list(D.kfold(23, 5, seed=1))
    tests = np.concatenate([te for _, te in folds])
    assert sorted(tests.tolist()) == list(range(23))
    for tr, te in folds:
        assert not set(tr) & set(te)


def test_metrics():
    assert classification([0, 1, 1, 0], [0, 1, 0, 0]) == {"accuracy": 0.75, "f1": pytest.approx(2 / 3)}
    assert regression([1, 2], [1, 4]) == {"mse": 2.0, "mae": 1.0}


# --- end to end

def _toy_config(tmp_path, csv, **over):
    cfg = {
        "crypto": {"log_n": 11, "levels": 7, "delta_bits": 40, "enforce_security": False},
        "learning": {"alpha": 0.2, "rho": 0.5, "batch_size": 8, "global_iters": 3,
                     "local_iters": 2, "model": "logistic", "strategy": "LB", "packing": "da"},
        "approx": {"interval": [-8.0, 8.0], "degree": 3},
        "data": {"path": str(csv), "parties": 3, "standardize": True, "intercept": True, "kfold": 2},
        "output": str(tmp_path / "run"),
    }
    for sec, d in over.items():
        cfg[sec].update(d)
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(cfg))
    return p


def test_train_linear_single_party(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 60)
    csv = write_csv(tmp_path / "lin.csv", ["x", "label"], [[a, 2 * a] for a in x])
    cfg = _toy_config(tmp_path, csv,
                      learning={"model": "linear", "alpha": 0.3, "rho": 1.0, "global_iters": 8,
                                "local_iters": 3},
                      data={"parties": 1, "standardize": False, "intercept": False})
    assert M.main(["train", "--config", str(cfg)]) == 0
    res = json.loads((tmp_path / "run" / "metrics.json").read_text())
    assert res["mse"] < 0.05
    assert abs(res["mse"] - res["baseline"]["mse"]) < 1e-4


def test_train_and_predict_logistic_blobs(tmp_path):
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 120)
    X = rng.normal(size=(120, 2)) + 2.0 * (2 * y[:, None] - 1)
    csv = write_csv(tmp_path / "blobs.csv", ["f1", "f2", "label"],
                    [[*r, int(t)] for r, t in zip(X.round(5), y)])
    cfg = _toy_config(tmp_path, csv)
    assert M.main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "run"
    res = json.loads((run / "metrics.json").read_text())
    assert res["accuracy"] >= 0.95
    man = json.loads((run / "manifest.json").read_text())
    assert len(man["pk_fingerprint"]) > 8
    out = tmp_path / "pred.csv"
    assert M.main(["predict", "--model", str(run), "--data", str(csv), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 121
    pred = np.array([float(l.split(",")[-1]) for l in lines[1:]])
    assert np.mean(pred == y) >= 0.95


def test_bench_diagonal_rotations():
    res = M.cmd_bench(4, 4, "da", log_n=11, protocols=False)
    assert res["measured"]["rotate"] == 4
    assert res["max_error"] < 1e-6


def test_fit_command(tmp_path):
    res = M.cmd_fit("sigmoid", (-8, 8), 3, "ls", tmp_path / "s.json")
    assert res["max_error"] < 0.15
    assert json.loads((tmp_path / "s.json").read_text())["degree"] == 3


def test_keygen_command(tmp_path, capsys):
    cfg = tmp_path / "k.yaml"
    cfg.write_text(yaml.safe_dump({"crypto": {"log_n": 11, "levels": 5, "enforce_security": False},
                                   "learning": {"model": "linear", "packing": "da", "batch_size": 4,
                                                "local_iters": 1},
                                   "data": {"parties": 2}}))
    assert M.main(["keygen", "--config", str(cfg), "--out", str(tmp_path / "k2")]) == 0
    info = json.loads((tmp_path / "k2" / "keygen.json").read_text())
    assert len(set(info["party_fingerprints"].values())) == 1


# --- exit codes

def test_exit_code_validation(capsys):
    assert M.main(["validate", "--preset", "SP2", "--packing", "rba", "--features", "10"]) == 2
    assert "level_budget" in capsys.readouterr().err


def test_exit_code_ok(capsys):
    assert M.main(["validate", "--preset", "SP1", "--features", "10"]) == 0


def test_exit_code_ingestion(tmp_path, capsys):
    csv = write_csv(tmp_path / "bad.csv", ["a", "b"], [[1, 2]])
    cfg = _toy_config(tmp_path, csv)
    assert M.main(["train", "--config", str(cfg)]) == 2


def test_exit_code_precision(tmp_path, capsys):
    from mheglm.errors import MustBootstrapError, PrecisionError, ProtocolAbort
    assert M.exit_code(PrecisionError("x")) == 4
    assert M.exit_code(MustBootstrapError("x")) == 4
    assert M.exit_code(ProtocolAbort("x")) == 3
    # an unrepresentable learning rate is caught by validation before any key exists
    csv = write_csv(tmp_path / "t.csv", ["a", "label"], [[i / 10, i % 2] for i in range(20)])
    cfg = _toy_config(tmp_path, csv, crypto={"delta_bits": 30, "q0_bits": 40},
                      learning={"alpha": 2.0 ** -25, "rho": 0.1})
    assert M.main(["train", "--config", str(cfg)]) == 2
    assert "representable" in capsys.readouterr().err


def test_exit_code_protocol(tmp_path, capsys):
    run = tmp_path / "run"
    run.mkdir()
    csv = write_csv(tmp_path / "t.csv", ["a", "label"], [[i / 10, i % 2] for i in range(80)])
    cfg = CF.load_config(_toy_config(tmp_path, csv))
    man = {"config": cfg.as_dict(), "model_fold": 0, "pk_fingerprint": "not-the-key"}
    (run / "manifest.json").write_text(json.dumps(man))
    code = M.main(["predict", "--model", str(run), "--data", str(csv), "--out", str(tmp_path / "p.csv")])
    assert code == 3
