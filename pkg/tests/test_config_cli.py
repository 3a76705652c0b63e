import math

import numpy as np
import pytest

from hypseek.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from hypseek.config import SCHEMA, ConfigError, build_train_config, parse_config_file, resolve
from hypseek.data import Assay, FeatureStore, Ligand, write_assays, write_features
from hypseek.model import ModelParams, ProjectionHead, init_params, save_checkpoint


# -- config ------------------------------------------------------------------------

def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nepochs = 7\nlearning_rate = 0.01  # trailing\nthresholds = -1,0\n"
                   "hidden_dim = none\n")
    values = resolve(parse_config_file(cfg), {"epochs": "3", "seed": None})
    assert values["epochs"] == 3 and values["learning_rate"] == 0.01
    assert values["thresholds"] == (-1.0, 0.0) and values["seed"] == 0
    tc = build_train_config(values)
    assert tc.epochs == 3 and tc.buckets.thresholds == (-1.0, 0.0) and tc.hidden_dim is None
    assert resolve()["affinity_threshold"] == math.inf


@pytest.mark.parametrize("text", ["bogus = 1\n", "epochs\n", "epochs = 0\n", "tau = abc\n",
                                  "schedule = step\n", "learn_tau = maybe\n", "tau = nan\n"])
def test_config_errors(tmp_path, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    with pytest.raises(ConfigError, match="bad.cfg:1"):
        parse_config_file(cfg)


def test_config_cross_field_errors():
    with pytest.raises(ConfigError):
        build_train_config(resolve({}, {"thresholds": "1,0"}))
    with pytest.raises(ConfigError):
        resolve({}, {"nope": 1})
    with pytest.raises(ConfigError):
        parse_config_file("/nonexistent/run.cfg")


# -- fixtures ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--targets", "5", "--ligands", "10", "--dim", "6", "--seed", "3",
                 "--split", "0.6,0.2,0.2", "--output", str(d)]) == EXIT_OK
    return d


def _train_args(d, out, *extra):
    return ["train", "--assays", str(d / "assays.jsonl"), "--features", str(d / "features.bin"),
            "--embed-dim", "4", "--epochs", "2", "--batch-assays", "2",
            "--checkpoint", str(out / "m.ckpt"), "--loss-log", str(out / "loss.tsv"),
            "--run-log", str(out / "run.log"), *extra]


@pytest.fixture(scope="module")
def trained(fixture_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(_train_args(fixture_dir, out)) == EXIT_OK
    return out / "m.ckpt"


# -- train -------------------------------------------------------------------------------

def test_train_success_is_quiet_on_stderr(fixture_dir, tmp_path, capsys):
    assert main(_train_args(fixture_dir, tmp_path)) == EXIT_OK
    out, err = capsys.readouterr()
    assert err == ""
    assert "sha256=" in out and "cone_rad" in out
    assert (tmp_path / "m.ckpt").exists() and (tmp_path / "run.log").exists()


def test_train_flag_beats_config(fixture_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 5\nseed = 4\n")
    assert main(_train_args(fixture_dir, tmp_path, "--config", str(cfg), "--epochs", "1")) == 0
    rows = (tmp_path / "loss.tsv").read_text().splitlines()[1:]
    assert {r.split("\t")[0] for r in rows} == {"0"}


def test_train_epochs_zero(fixture_dir, tmp_path, capsys):
    assert main(_train_args(fixture_dir, tmp_path, "--epochs", "0")) == EXIT_CONFIG
    assert "epochs" in capsys.readouterr().err


def test_train_unknown_config_key(fixture_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("colour = blue\n")
    assert main(_train_args(fixture_dir, tmp_path, "--config", str(cfg))) == EXIT_CONFIG


def test_train_missing_feature_file(fixture_dir, tmp_path, capsys):
    args = _train_args(fixture_dir, tmp_path)
    missing = str(tmp_path / "nowhere.bin")
    args[args.index("--features") + 1] = missing
    assert main(args) == EXIT_DATA
    assert missing in capsys.readouterr().err


def test_train_resume_matches_full_run(fixture_dir, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    full.mkdir()
    part.mkdir()
    assert main(_train_args(fixture_dir, full, "--epochs", "4")) == 0
    assert main(_train_args(fixture_dir, part, "--epochs", "2", "--save-state",
                            str(part / "s.npz"))) == 0
    assert main(_train_args(fixture_dir, part, "--epochs", "4", "--resume",
                            str(part / "s.npz"))) == 0
    assert (full / "m.ckpt").read_bytes() == (part / "m.ckpt").read_bytes()


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for key in SCHEMA:
        assert "--" + key.name.replace("_", "-") in text


def test_usage_error_is_exit_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["screen", "--checkpoint", "x"])
    assert exc.value.code == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["rank", "--checkpoint", "a", "--assays", "b", "--features", "c", "--threads", "0"])
    assert exc.value.code == EXIT_CONFIG


# -- screen ------------------------------------------------------------------------------

def test_screen_labelled_report(fixture_dir, trained, tmp_path, capsys):
    assert main(["screen", "--checkpoint", str(trained), "--assays",
                 str(fixture_dir / "test.jsonl"), "--features", str(fixture_dir / "features.bin"),
                 "--output", str(tmp_path)]) == EXIT_OK
    assert capsys.readouterr().err == ""
    lines = (tmp_path / "report.tsv").read_text().splitlines()
    header = lines[0].split("\t")
    assert header[:4] == ["target", "AUROC", "BEDROC80.5", "EF0.5"]
    assert len(lines) == 2
    for line in lines[1:]:
        cells = dict(zip(header, line.split("\t")))
        for col in ("AUROC", "BEDROC80.5", "EF1"):
            float(cells[col])
        target = cells["target"]
        ranked = (tmp_path / f"{target}.tsv").read_text().splitlines()
        assert ranked[0].startswith(f"# query={target}\tcheckpoint=")
        assert len(ranked) == 2 + 10


def test_screen_unlabelled_has_no_report(tmp_path):
    store = FeatureStore(["p", "a", "b"], np.eye(3))
    write_features(tmp_path / "f.bin", store)
    write_assays(tmp_path / "a.jsonl", [Assay("x", "T", ("p",), [Ligand("a", "a"),
                                                                Ligand("b", "b")])])
    save_checkpoint(tmp_path / "m.ckpt", init_params(3, 2))
    out = tmp_path / "out"
    assert main(["screen", "--checkpoint", str(tmp_path / "m.ckpt"), "--assays",
                 str(tmp_path / "a.jsonl"), "--features", str(tmp_path / "f.bin"),
                 "--output", str(out)]) == EXIT_OK
    assert (out / "T.tsv").exists() and not (out / "report.tsv").exists()


def test_screen_corrupted_checkpoint(fixture_dir, trained, tmp_path):
    bad = tmp_path / "bad.ckpt"
    blob = bytearray(trained.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    bad.write_bytes(bytes(blob))
    assert main(["screen", "--checkpoint", str(bad), "--assays",
                 str(fixture_dir / "assays.jsonl"), "--features",
                 str(fixture_dir / "features.bin"), "--output", str(tmp_path)]) == EXIT_DATA


# -- rank ------------------------------------------------------------------------------

def test_rank_noise_free_is_perfect(tmp_path, capsys):
    d = tmp_path
    assert main(["synth", "--targets", "6", "--ligands", "12", "--dim", "8", "--noise", "0",
                 "--output", str(d)]) == 0
    assert main(["train", "--assays", str(d / "assays.jsonl"), "--features",
                 str(d / "features.bin"), "--epochs", "30", "--embed-dim", "8",
                 "--learning-rate", "1e-2", "--batch-assays", "3", "--checkpoint",
                 str(d / "m.ckpt"), "--loss-log", str(d / "l.tsv"),
                 "--run-log", str(d / "r.log")]) == 0
    capsys.readouterr()
    assert main(["rank", "--checkpoint", str(d / "m.ckpt"), "--assays", str(d / "assays.jsonl"),
                 "--features", str(d / "features.bin")]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    assert all(r.split("\t")[2] == "1.000000" for r in rows)


def test_rank_skips_and_undefined(tmp_path, capsys):
    store = FeatureStore(["p", "a", "b", "c"], np.eye(4))
    write_features(tmp_path / "f.bin", store)
    write_assays(tmp_path / "a.jsonl", [
        Assay("one", "T1", ("p",), [Ligand("a", "a", True, 1.0)]),
        Assay("flat", "T2", ("p",), [Ligand("b", "b", True, 2.0), Ligand("c", "c", False, 1.0)]),
    ])
    zero = ProjectionHead(((np.zeros((2, 4)), np.zeros(2)),))
    save_checkpoint(tmp_path / "m.ckpt", ModelParams(zero, zero, zero))
    code = main(["rank", "--checkpoint", str(tmp_path / "m.ckpt"), "--assays",
                 str(tmp_path / "a.jsonl"), "--features", str(tmp_path / "f.bin"),
                 "--output", str(tmp_path / "table.tsv")])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "warning: assay one" in out and "# skipped one" in out
    assert "flat\tundefined\tundefined" in out
    assert (tmp_path / "table.tsv").read_text() in out


# -- synth and geomcheck ---------------------------------------------------------------------

def test_synth_checksums_stable(tmp_path, capsys):
    for sub in ("a", "b"):
        assert main(["synth", "--targets", "4", "--ligands", "5", "--dim", "3", "--cliffs", "6",
                     "--output", str(tmp_path / sub)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[:3] == out[3:]
    assert {line.split()[1] for line in out[:3]} == {"assays.jsonl", "features.bin",
                                                     "pairs.jsonl"}


def test_synth_bad_split(tmp_path):
    assert main(["synth", "--split", "0.5,0.5", "--output", str(tmp_path)]) == EXIT_CONFIG


def test_geomcheck_theta_table(capsys):
    code = main(["geomcheck", "--theta", "1e-2,1e-3"])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "error quotient" in out and "FAIL" not in out
    assert main(["geomcheck", "--theta", "abc"]) == EXIT_CONFIG
