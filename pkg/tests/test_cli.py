import pytest

from mtlab import cli, formats


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    args = ["gen-data", "--out", str(d / "data"), "--labeled", "16", "--auxiliary", "8",
            "--target-test", "8", "--validation", "4", "--target-train", "4"]
    assert cli.main(args) == 0
    assert cli.main(["pretrain", "--data", str(d / "data"), "--iters", "20",
                     "--out", str(d / "pre.mtfl")]) == 0
    return d


def test_gen_data_layout(workdir):
    ds = formats.load_dataset(workdir / "data")
    assert len(ds["s1"]) == 16 and len(ds["t/test"]) == 8 and len(ds["val/s3"]) == 4


def test_train_eval_probe(workdir, capsys):
    d = workdir
    cfg = d / "trainer.cfg"
    cfg.write_text("iters_mt=6\neval_every=0\nbatch=2\n")
    assert cli.main(["train", "--data", str(d / "data"), "--init", str(d / "pre.mtfl"),
                     "--mode", "ss-dgod", "--beta", "0.5", "--alpha", "0.99", "--seed", "1",
                     "--config", str(cfg), "--out", str(d / "t.mtfl"),
                     "--student-out", str(d / "s.mtfl"), "--history", str(d / "h.csv")]) == 0
    _, meta = formats.load_checkpoint(d / "t.mtfl")
    assert meta["mode"] == "ss-dgod" and meta["network"] == "teacher" and meta["iteration"] == 6
    hist = formats.read_csv(d / "h.csv")
    assert {"sup", "unsup/s2", "regul/s3", "total"} <= {r["term"] for r in hist}

    capsys.readouterr()
    assert cli.main(["eval", "--data", str(d / "data"), "--ckpt", str(d / "t.mtfl"),
                     "--split", "target", "--out", str(d / "e.csv")]) == 0
    assert "mAP50" in capsys.readouterr().out
    assert len(formats.read_csv(d / "e.csv")) == 3

    # the student of a mean-teacher run is refused unless asked for
    assert cli.main(["eval", "--data", str(d / "data"), "--ckpt", str(d / "s.mtfl")]) == 2
    assert cli.main(["eval", "--data", str(d / "data"), "--ckpt", str(d / "s.mtfl"),
                     "--allow-student"]) == 0

    assert cli.main(["probe-flatness", "--data", str(d / "data"), "--ckpt", str(d / "t.mtfl"),
                     "--gammas", "0.5,1", "--samples", "3", "--scenes", "4",
                     "--out", str(d / "f.csv")]) == 0
    rows = formats.read_csv(d / "f.csv")
    assert list(rows[0]) == ["gamma", "sample_idx", "delta_abs", "mean"]
    assert len(rows) == 6


def test_run_benchmark_cli(tmp_path, capsys):
    suite = tmp_path / "suite.cfg"
    suite.write_text("methods=single-dg,ema-only\nseeds=0\nbetas=\nflat_samples=2\n"
                     "flat_scenes=4\ngap_samples=2\nfigures=false\niters_pretrain=10\n"
                     "iters_mt=10\neval_every=5\nlabeled=12\nauxiliary=4\ntarget_test=6\n"
                     "validation=4\ntarget_train=2\n")
    assert cli.main(["run-benchmark", "--suite", str(suite), "--out", str(tmp_path / "r")]) == 0
    out = capsys.readouterr().out
    assert "single_lt_ema" in out
    for name in ("eval.csv", "flatness.csv", "summary.csv", "checks.csv"):
        assert (tmp_path / "r" / name).exists()


def test_bad_config_key(tmp_path, workdir):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate=1\n")
    assert cli.main(["pretrain", "--data", str(workdir / "data"), "--config", str(cfg),
                     "--out", str(tmp_path / "x.mtfl")]) == 2
