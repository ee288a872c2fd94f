import json

import numpy as np
import pytest

from koopid import cli
from koopid.analysis import observability_matrix
from koopid.benchmarks.data import read_csv
from koopid.benchmarks.wiener_hammerstein import WhLiftedModel, WhSystem
from koopid.encoder import Encoder
from koopid.io import load_bundle, save_bundle
from koopid.koopman import KoopmanModel
from koopid.training import Scaler

TINY = ["--n-z", "3", "--lag", "2", "--horizon", "5", "--batch-size", "16", "--max-epochs", "2",
        "--encoder-hidden", "8", "--b-hidden", "6", "--k-hidden", "6", "--quiet"]


def _generate(tmp_path, name="data", *extra):
    out = tmp_path / name
    code = cli.main(["generate", "--system", "wh", "--snr", "10", "--seed", "0", "--n-train", "200",
                     "--n-val", "80", "--n-test", "80", "--out", str(out), *extra])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    data = _generate(tmp)
    run = tmp / "run"
    assert cli.main(["train", "--data", str(data), "--out", str(run), *TINY]) == 0
    return data, run


def test_generate_row_counts(tmp_path):
    out = tmp_path / "full"
    assert cli.main(["generate", "--system", "wh", "--snr", "10", "--seed", "0", "--out", str(out)]) == 0
    sizes = {name: len(read_csv(out / f"{name}.csv")[0]) for name in ("train", "val", "test")}
    assert sizes == {"train": 12000, "val": 4000, "test": 4000}
    meta = json.loads((out / "meta.json").read_text())
    assert meta["boundaries"] == [12000, 16000]
    assert meta["snr_db"] == 10.0 and meta["seed"] == 0
    assert (out / "test_clean.csv").exists()


def test_generate_poly(tmp_path):
    out = tmp_path / "poly"
    assert cli.main(["generate", "--system", "poly", "--out", str(out)]) == 0
    k, u, y = read_csv(out / "train.csv")
    assert u.shape == (1000, 0) and y.shape == (1000, 2)
    # compliant start: the trajectory is a genuine state trajectory of the polynomial system
    np.testing.assert_allclose(y[1:, 0], 0.99 * y[:-1, 0], rtol=1e-12)


def test_generate_rejects_noise_on_poly(tmp_path):
    assert cli.main(["generate", "--system", "poly", "--snr", "10", "--out", str(tmp_path / "p")]) == 2


def _snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def test_generate_is_byte_identical(tmp_path):
    first = _snapshot(_generate(tmp_path))
    assert _snapshot(_generate(tmp_path)) == first


def test_train_outputs(trained):
    data, run = trained
    report = json.loads((run / "report.json").read_text())
    assert report["status"] == "ok"
    assert report["version"] and report["config"]["n_z"] == 3
    assert report["train_config"]["horizon"] == 5
    assert len(report["report"]["val_loss"]) == report["report"]["epochs_run"] <= 2
    model, enc, scaler, doc = load_bundle(run / "model.json")
    assert model.n_z == 3 and enc.lag == 2


def test_train_defaults_match_reference_setting():
    args = cli._build_parser().parse_args(["train", "--data", "x"])
    cfg = cli._resolve("train", args)
    assert (cfg["n_z"], cfg["lag"], cfg["horizon"], cfg["batch_size"], cfg["lr"]) == (12, 12, 51, 256, 1e-3)


def test_train_byte_identical(trained):
    data, run = trained
    first = _snapshot(run)
    assert cli.main(["train", "--data", str(data), "--out", str(run), *TINY]) == 0
    assert _snapshot(run) == first


def test_train_both_noise_structures(trained, tmp_path):
    data, _ = trained
    reports = {}
    for k in ("none", "linear"):
        out = tmp_path / k
        assert cli.main(["train", "--data", str(data), "--out", str(out), "--k-structure", k, *TINY]) == 0
        reports[k] = json.loads((out / "report.json").read_text())["report"]
    assert set(reports["none"]) == set(reports["linear"])


def test_config_precedence(tmp_path):
    conf = tmp_path / "train.conf"
    conf.write_text("# tiny run\nn_z = 5\nlag = 4  # trailing comment\nhorizon = 7\n")
    args = cli._build_parser().parse_args(["train", "--config", str(conf), "--lag", "3", "--data", "d"])
    cfg = cli._resolve("train", args)
    assert cfg["lag"] == 3  # command line wins
    assert cfg["n_z"] == 5 and cfg["horizon"] == 7  # file beats default
    assert cfg["batch_size"] == 256  # default


def test_unknown_config_key_exits_2(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("n_z = 5\nlearning_rat = 0.1\n")
    assert cli.main(["train", "--config", str(conf), "--data", str(tmp_path)]) == 2
    conf.write_text("n_z = 5\nn_z = 6\n")
    assert cli.main(["train", "--config", str(conf), "--data", str(tmp_path)]) == 2
    assert cli.main(["train", "--data", str(tmp_path), "--n-z", "zero"]) == 2
    assert cli.main(["train", "--data", str(tmp_path), "--horizon", "0"]) == 2
    assert cli.main(["bogus"]) == 2


def test_bad_data_exits_3(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "missing"), *TINY]) == 3
    data = _generate(tmp_path)
    (data / "val.csv").write_text("k,u0,y0\n0,1.0\n")
    assert cli.main(["train", "--data", str(data), *TINY]) == 3


def test_eval_outputs(trained, tmp_path):
    data, run = trained
    out = tmp_path / "eval"
    assert cli.main(["eval", "--model", str(run / "model.json"), "--data", str(data), "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    for mode in ("simulation", "one-step"):
        assert set(metrics["nrms"][mode]) >= {"train", "val", "test"}
    assert metrics["skip"] == 2
    k, u, y = read_csv(out / "trace_test.csv")
    assert len(k) == 80


def test_eval_oracle_on_clean_data(tmp_path):
    data = tmp_path / "clean"
    assert cli.main(["generate", "--system", "wh", "--seed", "1", "--n-train", "300", "--n-val", "100",
                     "--n-test", "100", "--out", str(data)]) == 0
    out = tmp_path / "eval"
    assert cli.main(["eval", "--oracle", "--data", str(data), "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    for v in metrics["nrms"]["simulation"].values():
        assert v < 1e-6


def test_eval_dimension_mismatch(trained, tmp_path):
    _, run = trained
    poly = tmp_path / "poly"
    assert cli.main(["generate", "--system", "poly", "--out", str(poly)]) == 0
    assert cli.main(["eval", "--model", str(run / "model.json"), "--data", str(poly),
                     "--out", str(tmp_path / "e")]) == 3


def test_diagnose_trained_model(trained, tmp_path):
    _, run = trained
    out = tmp_path / "diag.json"
    assert cli.main(["diagnose", "--model", str(run / "model.json"), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["observability"]["n"] == 3
    counts = report["parameter_count"]
    assert counts["total"] == sum(v for k, v in counts.items() if k != "total") > 0


@pytest.mark.parametrize("seed", range(5))
def test_diagnose_fresh_model_radius(tmp_path, capsys, seed):
    model = KoopmanModel.initialize(12, 1, 1, "general", "linear", seed=seed)
    encoder = Encoder.initialize(12, 1, 1, 12, seed=seed)
    save_bundle(tmp_path / "fresh.json", model, encoder, Scaler.identity(1, 1))
    assert cli.main(["diagnose", "--model", str(tmp_path / "fresh.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["spectral_radius"] <= 0.95 + 1e-9
    assert report["observability"]["n"] == 12


def test_diagnose_builtin_wh(capsys):
    assert cli.main(["diagnose", "--builtin", "wh"]) == 0
    report = json.loads(capsys.readouterr().out)
    m = WhLiftedModel(WhSystem.default())
    direct = np.linalg.matrix_rank(observability_matrix(m.A, m.C, 12))
    assert report["observability"]["rank"] == direct
    assert report["observability"]["full_rank"] == (direct == 12)


def test_diagnose_builtin_poly(capsys):
    assert cli.main(["diagnose", "--builtin", "poly", "--horizon", "2"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["observability"]["rank"] == 3
    assert report["spectral_radius"] == pytest.approx(0.99)


def test_diagnose_missing_model(tmp_path):
    assert cli.main(["diagnose", "--model", str(tmp_path / "nope.json")]) == 3
    assert cli.main(["diagnose"]) == 2


def test_help_lists_commands(capsys):
    assert cli.main(["--help"]) == 0
    text = capsys.readouterr().out
    for name in ("generate", "train", "eval", "diagnose"):
        assert name in text
