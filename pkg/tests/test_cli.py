import csv

import numpy as np
import pytest

from tdtl import adapt, data, nn
from tdtl import transductive as T
from tdtl.cli import main, parse_grid, parse_schedule


@pytest.fixture(scope="module")
def feature_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert main(["gen", "--mode", "feature", "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def image_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("img")
    assert main(["gen", "--mode", "image", "--per-cell", "2", "--out", str(out)]) == 0
    return out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def meta(path):
    lines = (path / "run_meta.txt").read_text().splitlines()
    return dict(line.split("=", 1) for line in lines[1:])


def src_tgt(d):
    return ["--source", str(d / "source_features.csv"), "--target", str(d / "target_features.csv")]


# -- gen ------------------------------------------------------------------------

def test_gen_feature_outputs(feature_dir, capsys):
    names = sorted(p.name for p in feature_dir.iterdir())
    assert names == ["run_meta.txt", "source_features.csv", "source_manifest.csv",
                     "target_features.csv", "target_manifest.csv"]
    x, m = data.load_feature_csv(feature_dir / "source_features.csv")
    assert x.shape == (200, 16) and m.has_labels
    assert meta(feature_dir)["seed"] == "7"


def test_gen_image_outputs(image_dir):
    m = data.load_manifest(image_dir / "source_manifest.csv")
    img = data.read_pgm(image_dir / m.records[0].path)
    assert img.shape == (32, 32)
    lm = data.load_landmarks(image_dir / "landmarks.csv")
    assert len(lm) == 32 and all(v.shape == (68, 2) for v in lm.values())


def test_gen_requires_out(capsys):
    with pytest.raises(SystemExit) as info:
        main(["gen"])
    assert info.value.code == 2


def test_gen_io_failure(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--out", str(blocker / "sub")]) == 3
    assert "gen" in capsys.readouterr().err


def test_seed_defaults_to_42(tmp_path):
    assert main(["gen", "--per-cell", "1", "--out", str(tmp_path)]) == 0
    assert meta(tmp_path)["seed"] == "42"


# -- train-tdtl -------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(feature_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train-tdtl", *src_tgt(feature_dir), "--out", str(out), "--epochs", "40"]) == 0
    return out


def test_train_outputs(trained):
    rows = dict(r for r in read_rows(trained / "metrics.csv")[:4] if len(r) == 2)
    assert 0 <= float(rows["accuracy_percent"]) <= 100
    pred = read_rows(trained / "predictions.csv")
    assert pred[0] == ["sample_id", "predicted_class", "true_class"] and len(pred) == 201
    hist = read_rows(trained / "loss_history.csv")
    assert hist[0] == ["step", "lambda1", "lambda2", "loss"]
    assert hist[1][1:3] == ["1", "0"] and hist[2][1:3] == ["0", "1"]
    params = nn.load_checkpoint(trained / "model.tdtl")
    assert [w.shape for w in params.weights] == [(16, 64), (64, 32), (32, 4)]
    assert "label_zero_fraction" in meta(trained)


def test_train_alpha_sparsity(feature_dir, tmp_path):
    fractions = []
    for alpha in ("0", "150"):
        out = tmp_path / alpha
        assert main(["train-tdtl", *src_tgt(feature_dir), "--out", str(out), "--epochs", "5",
                     "--alpha", alpha]) == 0
        fractions.append(float(meta(out)["label_zero_fraction"]))
    assert fractions[1] >= fractions[0]


def test_train_zero_epochs_predicts_initial_argmax(feature_dir, tmp_path):
    assert main(["train-tdtl", *src_tgt(feature_dir), "--out", str(tmp_path), "--epochs", "0"]) == 0
    xs, ms = data.load_feature_csv(feature_dir / "source_features.csv")
    xt, _ = data.load_feature_csv(feature_dir / "target_features.csv")
    init = T.train(xs, ms.labels, xt, nn.default_architecture(16, 4),
                   T.TrainSchedule(epochs_max=0)).labels
    pred = [int(r[1]) for r in read_rows(tmp_path / "predictions.csv")[1:]]
    assert pred == np.argmax(init.values, axis=1).tolist()


def test_train_without_target_labels_skips_metrics(feature_dir, tmp_path):
    x, m = data.load_feature_csv(feature_dir / "target_features.csv")
    data.save_feature_csv(tmp_path / "t.csv", x, data.with_labels_hidden(m))
    assert main(["train-tdtl", "--source", str(feature_dir / "source_features.csv"),
                 "--target", str(tmp_path / "t.csv"), "--out", str(tmp_path / "o"),
                 "--epochs", "1"]) == 0
    assert not (tmp_path / "o" / "metrics.csv").exists()
    assert {r[2] for r in read_rows(tmp_path / "o" / "predictions.csv")[1:]} == {"-1"}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(feature_dir, tmp_path):
    x, m = data.load_feature_csv(feature_dir / "target_features.csv")
    x[:2, 0] = 1.7e308  # the domain mean overflows, so centred inputs turn non-finite
    data.save_feature_csv(tmp_path / "t.csv", x, m)
    code = main(["train-tdtl", "--source", str(feature_dir / "source_features.csv"),
                 "--target", str(tmp_path / "t.csv"), "--out", str(tmp_path / "o"),
                 "--epochs", "2"])
    assert code == 4


def test_train_missing_input(tmp_path):
    assert main(["train-tdtl", "--source", str(tmp_path / "nope.csv"), "--target",
                 str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 3


def test_train_bad_schedule_is_usage_error(feature_dir, tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["train-tdtl", *src_tgt(feature_dir), "--out", str(tmp_path), "--schedule", "1,2"])
    assert info.value.code == 2


def test_config_file_with_flag_override(feature_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"source={feature_dir / 'source_features.csv'}\n"
                   f"target={feature_dir / 'target_features.csv'}\n"
                   f"out={tmp_path / 'o'}\nepochs=3\nalpha=5\n# comment\n")
    assert main(["train-tdtl", "--config", str(cfg), "--alpha", "0.5"]) == 0
    m = meta(tmp_path / "o")
    assert m["flag.alpha"] == "0.5" and m["flag.epochs"] == "3"


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour=blue\n")
    with pytest.raises(SystemExit) as info:
        main(["gen", "--config", str(cfg), "--out", str(tmp_path)])
    assert info.value.code == 2


# -- baseline -------------------------------------------------------------------

def test_baseline_sa_identical_domains(feature_dir, tmp_path, capsys):
    src = str(feature_dir / "source_features.csv")
    out = tmp_path / "sa.csv"
    assert main(["baseline", "--method", "sa", "--source", src, "--target", src,
                 "--out", str(out)]) == 0
    rows = read_rows(out)
    assert rows[0] == ["method", "param", "value", "accuracy", "f1_macro"]
    best = max(float(r[3]) for r in rows[1:])
    x, m = data.load_feature_csv(src)
    within = 100 * np.mean(adapt.nn1_classify(x, m.labels, x) == m.labels)
    assert abs(best - within) <= 1.0
    assert capsys.readouterr().out.startswith("best sa d=")


def test_baseline_single_value_grid(feature_dir, tmp_path):
    out = tmp_path / "tca.csv"
    assert main(["baseline", "--method", "tca", *src_tgt(feature_dir), "--grid", "5",
                 "--out", str(out)]) == 0
    rows = read_rows(out)
    assert len(rows) == 2 and rows[1][:3] == ["tca", "mu", "5"]


def test_baseline_unknown_method(feature_dir, tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["baseline", "--method", "tkl", *src_tgt(feature_dir), "--out", str(tmp_path / "x")])
    assert info.value.code == 2


def test_baseline_infeasible_grid(feature_dir, tmp_path, capsys):
    code = main(["baseline", "--method", "gfk", *src_tgt(feature_dir), "--grid", "50:100:10",
                 "--out", str(tmp_path / "x.csv")])
    assert code == 4


def test_grid_parsing():
    assert parse_grid("10:100:10") == tuple(float(v) for v in range(10, 101, 10))
    assert parse_grid("1:3") == (1.0, 2.0, 3.0)
    assert parse_grid("2, 7") == (2.0, 7.0)
    assert parse_schedule("1,0;0,1") == ((1.0, 0.0), (0.0, 1.0))


# -- features / eval ----------------------------------------------------------------

def test_features_lbp(image_dir, tmp_path):
    out = tmp_path / "lbp.csv"
    assert main(["features", "--kind", "lbp", "--manifest", str(image_dir / "source_manifest.csv"),
                 "--out", str(out)]) == 0
    x, m = data.load_feature_csv(out)
    assert x.shape == (16, 3776) and m.has_labels


def test_features_sift(image_dir, tmp_path):
    out = tmp_path / "sift.csv"
    assert main(["features", "--kind", "sift", "--manifest", str(image_dir / "target_manifest.csv"),
                 "--landmarks", str(image_dir / "landmarks.csv"), "--out", str(out)]) == 0
    x, _ = data.load_feature_csv(out)
    assert x.shape == (16, 8704)


def test_features_sift_needs_landmarks(image_dir, tmp_path, capsys):
    assert main(["features", "--kind", "sift", "--manifest",
                 str(image_dir / "source_manifest.csv"), "--out", str(tmp_path / "x.csv")]) == 2


def test_eval_self_is_perfect(trained, tmp_path):
    pred = str(trained / "predictions.csv")
    assert main(["eval", "--predictions", pred, "--truth", pred, "--out",
                 str(tmp_path / "m.csv")]) == 0
    assert read_rows(tmp_path / "m.csv")[1] == ["accuracy_percent", "100.0000"]


def test_eval_against_manifest(trained, feature_dir, tmp_path):
    assert main(["eval", "--predictions", str(trained / "predictions.csv"), "--truth",
                 str(feature_dir / "target_manifest.csv"), "--out", str(tmp_path / "m.csv")]) == 0
    assert (tmp_path / "m.csv").read_text() == (trained / "metrics.csv").read_text()
