import numpy as np
import pytest

from hdmnet.cli import main, read_run_config, resolve_seed
from hdmnet.pnm import read_pnm

TINY_CONFIG = """\
# two stages on 32x32 images
stages = 2
channels = 4, 6
image_size = 32
steps = 3
batch = 2
train_episodes = 4
eval_every = 0
checkpoint = {ckpt}
metrics_log = {log}
"""


@pytest.fixture
def trained(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    ckpt, log = tmp_path / "run.ckpt", tmp_path / "run.csv"
    cfg.write_text(TINY_CONFIG.format(ckpt=ckpt, log=log), encoding="utf-8")
    assert main(["train", "--config", str(cfg)]) == 0
    capsys.readouterr()
    return ckpt, log


def test_seed_resolution(monkeypatch):
    monkeypatch.delenv("HDM_SEED", raising=False)
    assert resolve_seed(None) == 0
    monkeypatch.setenv("HDM_SEED", "17")
    assert resolve_seed(None) == 17
    assert resolve_seed(4) == 4
    monkeypatch.setenv("HDM_SEED", "abc")
    with pytest.raises(SystemExit):
        resolve_seed(None)


def test_config_seed_falls_back_to_env(tmp_path, monkeypatch):
    monkeypatch.setenv("HDM_SEED", "9")
    p = tmp_path / "a.cfg"
    p.write_text("steps = 1\n", encoding="utf-8")
    assert read_run_config(p).seed == 9
    p.write_text("steps = 1\nseed = 2  # explicit wins\n", encoding="utf-8")
    assert read_run_config(p).seed == 2


def test_train_writes_checkpoint_log_and_sidecar(trained):
    ckpt, log = trained
    assert ckpt.read_bytes()[:4] == b"HDMC"
    assert log.read_text(encoding="utf-8").splitlines()[0] == "step,loss,ce,kl"
    assert (ckpt.parent / "run.ckpt.cfg").exists()


def test_train_rejects_unknown_key(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("learning_rate = 0.1\n", encoding="utf-8")
    assert main(["train", "--config", str(p)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_eval_report_reproducible(trained, capsys):
    ckpt, _ = trained
    args = ["eval", "--ckpt", str(ckpt), "--episodes", "6", "--k", "1", "--seed", "5"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first
    assert first.startswith("mIoU ") and "episodes 6" in first and "seed 5" in first


def test_eval_uses_env_seed(trained, capsys, monkeypatch):
    ckpt, _ = trained
    monkeypatch.setenv("HDM_SEED", "5")
    assert main(["eval", "--ckpt", str(ckpt), "--episodes", "3"]) == 0
    assert "seed 5" in capsys.readouterr().out


def test_eval_oracles(capsys):
    assert main(["eval", "--oracle", "gt", "--episodes", "4", "--seed", "0"]) == 0
    assert capsys.readouterr().out.startswith("mIoU 1.000000")
    assert main(["eval", "--oracle", "background", "--episodes", "4", "--seed", "0"]) == 0
    assert capsys.readouterr().out.startswith("mIoU 0.000000")


def test_eval_writes_predicted_masks(trained, tmp_path, capsys):
    ckpt, _ = trained
    out = tmp_path / "pred"
    assert main(["eval", "--ckpt", str(ckpt), "--episodes", "2", "--seed", "0", "--out", str(out)]) == 0
    mask = read_pnm(out / "pred_0000.pgm")
    assert mask.shape == (32, 32) and set(np.unique(mask)) <= {0, 255}


def test_eval_without_checkpoint_is_error():
    with pytest.raises(SystemExit):
        main(["eval", "--episodes", "2"])


def test_dump_corr(trained, tmp_path, capsys):
    ckpt, _ = trained
    out = tmp_path / "corr"
    assert main(["dump-corr", "--ckpt", str(ckpt), "--out", str(out), "--episodes", "1", "--seed", "0"]) == 0
    d = out / "episode_000"
    for l in (1, 2):
        raw = (d / f"corr_stage{l}.pgm").read_bytes()
        assert raw.startswith(b"P5")
    assert read_pnm(d / "corr_stage1.pgm").shape == (4, 4)
    assert read_pnm(d / "query.ppm").shape == (3, 32, 32)


def test_make_data(tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["make-data", "--out", str(out), "--episodes", "2", "--k", "2", "--seed", "1"]) == 0
    d = out / "episode_001"
    assert (d / "query.ppm").read_bytes().startswith(b"P6")
    assert (d / "support_1_mask.pgm").read_bytes().startswith(b"P5")
    assert int((d / "class.txt").read_text()) in (6, 7)
    assert read_pnm(d / "query_mask.pgm").max() == 255


def test_grad_check_passes(capsys):
    assert main(["grad-check", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "end_to_end" in out and "max relative error" in out
