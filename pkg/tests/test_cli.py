import json
import subprocess
import sys

import pytest

from evoked.cli import main
from evoked.synth import corpus_digest

FAST = {"train": {"batch_size": 32, "max_epochs": 2, "patience": 1},
        "backbone": {"embed_dim": 8, "conv_stages": [[3, 8, 2], [3, 16, 2]]}}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    cfg = out / "synth.json"
    cfg.write_text(json.dumps({"synth": {"segments_per_movie": 10, "viewers": 2, "feature_dim": 6,
                                         "vocab_size": 40}}))
    assert main(["synth", "--config", str(cfg), "--seed", "7", "--outdir", str(out / "runs")]) == 0
    (run_dir,) = (out / "runs").iterdir()
    return out, run_dir / "corpus" / "manifest.json"


def write_cfg(path, **extra):
    path.write_text(json.dumps(dict(FAST, **extra)))
    return path


def test_folds_prints_table(capsys):
    code, out, _ = run(capsys, "folds", "--protocol", "table1")
    assert code == 0
    assert out.splitlines()[0] == "F1 | CRA, DEP, FNE, GLA, LOR | CHI | BMI"
    assert len(out.splitlines()) == 7
    code, out, _ = run(capsys, "folds", "--protocol", "baseline")
    assert out.strip() == "B | BMI, CHI, FNE, GLA, LOR |  | CRA, DEP"


def test_synth_twice_is_identical(corpus, tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--seed", "7", "--outdir", tmp_path)
    code2, out2, _ = run(capsys, "synth", "--seed", "7", "--outdir", tmp_path / "again")
    assert code == code2 == 0
    a, b = out.strip().rsplit("/", 1)[0], out2.strip().rsplit("/", 1)[0]
    assert corpus_digest(a) == corpus_digest(b)


def test_ingest(corpus, capsys):
    _, manifest = corpus
    code, out, _ = run(capsys, "ingest", "--manifest", manifest)
    stats = json.loads(out)
    assert code == 0 and stats["segments"] == 70 and stats["viewer_count"] == 2


def test_crossval_matches_train_then_eval(corpus, tmp_path, capsys):
    _, manifest = corpus
    cfg = write_cfg(tmp_path / "c.json", folds=["F3"])
    code, out, _ = run(capsys, "crossval", "--config", cfg, "--manifest", manifest, "--seed", "5",
                       "--outdir", tmp_path / "cv")
    assert code == 0
    (cv_dir,) = (tmp_path / "cv").iterdir()
    report = json.loads((cv_dir / "report.json").read_text())
    assert (cv_dir / "config.json").exists() and (cv_dir / "checkpoints" / "F3_mt.ckpt").exists()
    assert out.splitlines()[0] == "model,V1,V2,Vavg,Mean"
    assert [line.split(",")[0] for line in out.splitlines()[1:]] == ["Random", "Positive", "Negative", "MT-both"]

    cfg = write_cfg(tmp_path / "t.json")
    assert run(capsys, "train", "--config", cfg, "--manifest", manifest, "--seed", "5", "--fold", "F3",
               "--outdir", tmp_path / "tr")[0] == 0
    (tr_dir,) = (tmp_path / "tr").iterdir()
    ckpt = tr_dir / "model.ckpt"
    assert (tr_dir / "train_log.jsonl").read_text().count("\n") >= 1
    code, out, _ = run(capsys, "eval", "--manifest", manifest, "--checkpoint", ckpt, "--outdir", tmp_path / "ev")
    assert code == 0
    ev = json.loads(out)
    assert ev["folds"]["F3"] == report["folds"]["F3"]
    # the crossval checkpoint holds the same weights as the one from train
    from evoked.model import read_checkpoint
    a, b = read_checkpoint(ckpt), read_checkpoint(cv_dir / "checkpoints" / "F3_mt.ckpt")
    assert a.tensors.keys() >= b.tensors.keys()
    assert all((a.tensors[k] == b.tensors[k]).all() for k in b.tensors)


def test_crossval_twice_is_identical(corpus, tmp_path, capsys):
    _, manifest = corpus
    cfg = write_cfg(tmp_path / "c.json", folds=["F1"], model="st", target="Vavg")
    for name in ("a", "b"):
        assert run(capsys, "crossval", "--config", cfg, "--manifest", manifest, "--outdir", tmp_path / name)[0] == 0
    (a,), (b,) = (tmp_path / "a").iterdir(), (tmp_path / "b").iterdir()
    assert a.name == b.name
    assert corpus_digest(a) == corpus_digest(b)


def test_analyze(corpus, tmp_path, capsys):
    _, manifest = corpus
    code, out, _ = run(capsys, "analyze", "--manifest", manifest, "--outdir", tmp_path)
    assert code == 0 and out.splitlines()[0] == ",V1,V2,Vavg"
    (d,) = tmp_path.iterdir()
    assert (d / "correlation_BMI.csv").exists() and (d / "histograms.csv").exists()
    assert "mean_viewer_correlation" in json.loads((d / "analysis.json").read_text())


def test_st_train_with_target(corpus, tmp_path, capsys):
    _, manifest = corpus
    cfg = write_cfg(tmp_path / "t.json")
    code, out, _ = run(capsys, "train", "--config", cfg, "--manifest", manifest, "--model", "st",
                       "--target", "V2", "--modality", "text", "--outdir", tmp_path)
    assert code == 0
    from evoked.model import load_checkpoint
    m = load_checkpoint(out.strip())
    assert m.kind == "st" and m.target == "V2" and m.modalities == "text"


@pytest.mark.parametrize("argv,fragment", [
    (["train"], "needs --manifest"),
    (["crossval", "--manifest", "/nonexistent.json"], "nonexistent"),
    (["folds", "--workers", "0"], "--workers"),
])
def test_invalid_configuration_exits_1(argv, fragment, capsys):
    code, _, err = run(capsys, *argv)
    assert code == 1 and fragment in err


def test_bad_config_file(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"learning_rate": -1}}))
    assert run(capsys, "folds", "--config", p)[0] == 1
    p.write_text(json.dumps({"bogus": 1}))
    assert run(capsys, "folds", "--config", p)[0] == 1


def test_unknown_fold_and_target(corpus, tmp_path, capsys):
    _, manifest = corpus
    assert run(capsys, "train", "--manifest", manifest, "--fold", "F9")[0] == 1
    cfg = write_cfg(tmp_path / "t.json")
    code, _, err = run(capsys, "train", "--config", cfg, "--manifest", manifest, "--model", "st", "--target", "V9",
                       "--outdir", tmp_path)
    assert code == 1 and "V9" in err


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "evoked", "folds"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.count("\n") == 7
