import subprocess
import sys
from fractions import Fraction

import pytest

from mudeep.checkpoint import load_checkpoint
from mudeep.cli import main, resolve_threads, UsageError
from mudeep.config import RunConfig, parse_assignment
from mudeep.data import load_manifest
from mudeep.errors import ConfigError

TINY = ["model.input_shape=3,32,16", "model.channel_scale=1/8", "model.embedding_dim=16",
        "model.verif_hidden=8", "train.batch_size=4", "train.stage_iters=2,1,2"]


def sets(pairs):
    return [a for p in pairs for a in ("--set", p)]


# ------------------------------------------------------------------ config


@pytest.mark.parametrize("name", ["paper", "desk"])
def test_serialize_parse_fixed_point(name):
    cfg = RunConfig.preset(name)
    back = RunConfig.parse(cfg.serialize())
    assert back == cfg
    assert back.serialize() == cfg.serialize() and back.hash() == cfg.hash()


def test_overrides_and_types():
    cfg = RunConfig().with_overrides([("model.channel_scale", "1/4"), ("model.use_fusion", "false"),
                                      ("train.lr0", "0.5"), ("train.stage_iters", "1,2,3"),
                                      ("train.lr0", "0.25")])
    assert cfg.model.channel_scale == Fraction(1, 4) and cfg.model.use_fusion is False
    assert cfg.train.lr0 == 0.25 and cfg.train.stage_iters == (1, 2, 3)
    assert cfg.hash() != RunConfig().hash()


@pytest.mark.parametrize("pair", [("model.nope", "1"), ("bogus.lr0", "1"), ("train", "1"),
                                  ("train.batch_size", "many"), ("eval.backend", "cosine"),
                                  ("train.batch_size", "1")])
def test_bad_overrides(pair):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides([pair])


def test_parse_comments_and_errors(tmp_path):
    cfg = RunConfig.parse("# comment\n\ntrain.seed = 4\n")
    assert cfg.train.seed == 4
    with pytest.raises(ConfigError, match="line 1"):
        RunConfig.parse("no equals sign\n")
    with pytest.raises(ConfigError):
        parse_assignment("novalue")
    p = tmp_path / "c.txt"
    cfg.save(p)
    assert RunConfig.load(str(p)) == cfg
    with pytest.raises(FileNotFoundError):
        RunConfig.load(str(tmp_path / "missing.txt"))


def test_thread_resolution(monkeypatch):
    monkeypatch.delenv("MUDEEP_THREADS", raising=False)
    assert resolve_threads(None) == 1
    monkeypatch.setenv("MUDEEP_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.setenv("MUDEEP_THREADS", "x")
    with pytest.raises(UsageError):
        resolve_threads(None)
    with pytest.raises(UsageError):
        resolve_threads(0)


# ------------------------------------------------------------------ CLI


def test_inspect_full_width_output(capsys):
    assert main(["inspect"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("seed: 0  config: ")
    for token in ("78×28×96", "39×14×256", "4096", "512", "total parameters"):
        assert token in out
    msb = [line for line in out.splitlines() if line.startswith("Multi-scale-B")]
    assert len(msb) == 4 and all("39×14×256" in line for line in msb)


def test_usage_errors_exit_1(capsys, tmp_path):
    assert main(["inspect", "--set", "model.bogus=1"]) == 1
    assert main(["inspect", "--set", "novalue"]) == 1
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1
    assert main(["train", "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "m.csv"
    bad.write_text("img.ppm,abc,0\n")
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "field 2" in capsys.readouterr().err
    assert main(["eval", "--ckpt", str(tmp_path / "none.mudp"), "--probe-manifest", "a",
                 "--gallery-manifest", "b"]) == 2
    (tmp_path / "x.mudp").write_bytes(b"MUDP\x01")
    assert main(["eval", "--ckpt", str(tmp_path / "x.mudp"), "--probe-manifest", "a",
                 "--gallery-manifest", "b"]) == 2


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--ids", "3", "--per-cam", "2", "--seed", "0", "--out", str(out)]) == 0
    return out


def test_synth_writes_manifests(corpus):
    assert len(load_manifest(corpus / "manifest.csv")) == 12
    cam0 = load_manifest(corpus / "cam0.csv")
    assert len(cam0) == 6 and {r.camera for r in cam0} == {0}


def test_train_twice_identical_then_eval_and_visualize(corpus, tmp_path, capsys):
    args = ["train", "--data", str(corpus / "manifest.csv"), "--seed", "3", "--threads", "1",
            "--log-every", "1"] + sets(TINY)
    assert main(args + ["--out", str(tmp_path / "r1")]) == 0
    assert main(args + ["--out", str(tmp_path / "r2")]) == 0
    m1 = (tmp_path / "r1" / "metrics.csv").read_bytes()
    assert m1 == (tmp_path / "r2" / "metrics.csv").read_bytes()
    assert len(m1.decode().splitlines()) == 6
    out = capsys.readouterr().out
    assert "seed: 3  config: " in out and "iter 4 stage 3" in out

    ck = load_checkpoint(tmp_path / "r1" / "model.mudp")
    assert ck.iteration == 5
    cfg = RunConfig.parse(ck.config_text)
    assert cfg.model.num_identities == 3 and cfg.train.seed == 3
    assert (tmp_path / "r1" / "config.txt").read_text() == ck.config_text

    ev = ["eval", "--ckpt", str(tmp_path / "r1" / "model.mudp"), "--probe-manifest", str(corpus / "cam0.csv"),
          "--gallery-manifest", str(corpus / "cam1.csv"), "--trials", "2"]
    assert main(ev) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[-1].startswith("Rank-1: ") and "Rank-5: " in lines[-1] and "Rank-10: " in lines[-1]
    assert (tmp_path / "r1" / "cmc.csv").exists()
    assert main(ev + ["--backend", "euclidean", "--out", str(tmp_path / "ev")]) == 0
    assert main(ev + ["--trials", "0"]) == 1

    img = load_manifest(corpus / "cam0.csv")[0].path
    assert main(["visualize", "--ckpt", str(tmp_path / "r1" / "model.mudp"), "--imgA", img, "--imgB", img,
                 "--out", str(tmp_path / "vis"), "--top", "1"]) == 0
    assert (tmp_path / "vis" / "alpha.csv").exists()

    # resume continues the schedule from the stored iteration
    res = ["train", "--data", str(corpus / "manifest.csv"), "--seed", "3", "--resume",
           str(tmp_path / "r1" / "model.mudp"), "--out", str(tmp_path / "r3")] + sets(TINY[:-1]) + \
        ["--set", "train.stage_iters=2,1,4"]
    assert main(res) == 0
    rows = (tmp_path / "r3" / "metrics.csv").read_text().splitlines()[1:]
    assert [r.split(",")[0] for r in rows] == ["5", "6"]


def test_gradcheck_command_tiny(capsys):
    assert main(["gradcheck", "--coords", "3"] + sets(TINY[:4] + ["model.num_identities=4"])) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out and "fusion" in out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_3(corpus, tmp_path, capsys):
    code = main(["train", "--data", str(corpus / "manifest.csv"), "--out", str(tmp_path)] + sets(TINY)
                + ["--set", "train.lr0=1e30"])
    assert code == 3
    assert "non-finite" in capsys.readouterr().err
    assert (tmp_path / "metrics.csv").exists()


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "mudeep.cli", "inspect", "--config", "desk"],
                       capture_output=True, text=True, timeout=60)
    assert r.returncode == 0 and "39×14×64" in r.stdout
