import json

import numpy as np
import pytest

from reverse_aging.cli import ConfigError, parse_config, run_command
from reverse_aging.images import save_png
from reverse_aging.trainer import load_checkpoint

TINY = """
[model]
image_size = 32
base_channels = 4
n_residual_blocks = 1
disc_base_channels = 4
disc_layers = 2
[synth]
tile_size = 32
train_d = 4
train_h = 4
test_d = 3
test_h = 3
[train]
iterations = 4
checkpoint_every = 2
"""


def error_line(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    return json.loads(lines[-1])


@pytest.fixture
def tiny(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY + f"[data]\ncorpus = {tmp_path / 'corpus'}\n")
    assert run_command(["synth", "--config", str(cfg), "--out", str(tmp_path / "corpus")]) == 0
    return tmp_path, cfg


# -- configuration ------------------------------------------------------------

def test_empty_config_is_all_defaults(tmp_path):
    p = tmp_path / "empty.ini"
    p.write_text("")
    cfg = parse_config(p)
    assert cfg["model.lambda"] == 10.0 and cfg["train.lr"] == 2e-4 and cfg["data.unit"] == 256
    assert cfg["train.smooth_window"] == 300 and cfg["train.smooth_stride"] == 10
    assert cfg.digest() == parse_config(None).digest()


def test_negative_lambda_names_key(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[model]\nlambda = -1\n")
    with pytest.raises(ConfigError) as exc:
        parse_config(p)
    assert exc.value.key == "model.lambda"


@pytest.mark.parametrize("body,key", [("[model]\nwidth = 3\n", "model.width"),
                                      ("[extra]\na = 1\n", "extra"),
                                      ("[train]\niterations = many\n", "train.iterations"),
                                      ("[detect]\neps_mode = median\n", "detect.eps_mode"),
                                      ("[model]\nimage_size = 30\n", "model.image_size")])
def test_config_errors_name_the_key(tmp_path, body, key):
    p = tmp_path / "bad.ini"
    p.write_text(body)
    with pytest.raises(ConfigError) as exc:
        parse_config(p)
    assert exc.value.key == key


def test_digest_ignores_key_order(tmp_path):
    a, b = tmp_path / "a.ini", tmp_path / "b.ini"
    a.write_text("[train]\nseed = 3\nlr = 0.001\n[model]\nlambda = 5\n")
    b.write_text("[model]\nlambda = 5.0\n[train]\nlr = 1e-3\nseed = 3\n")
    assert parse_config(a).digest() == parse_config(b).digest()
    assert parse_config(a).digest() != parse_config(None).digest()


# -- commands --------------------------------------------------------------------

def test_synth_layout_and_determinism(tiny, tmp_path):
    root, cfg = tiny
    assert run_command(["synth", "--config", str(cfg), "--out", str(root / "again")]) == 0
    for f in (root / "corpus").rglob("*.png"):
        assert (root / "again" / f.relative_to(root / "corpus")).read_bytes() == f.read_bytes()
    run = json.loads((root / "corpus" / "run.json").read_text())
    assert run["command"] == "synth" and "manifest.jsonl" in run["outputs"]
    assert {"config_digest", "input_digests", "tool_version", "started", "finished"} <= set(run)


def test_train_eval_detect(tiny, capsys):
    root, cfg = tiny
    assert run_command(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    names = sorted(p.name for p in (root / "run" / "checkpoints").iterdir())
    assert names == ["ckpt_000002.agln", "ckpt_000004.agln", "final.agln"]
    lines = (root / "run" / "loss.csv").read_text().splitlines()
    assert lines[0] == "iter,loss_g,loss_cyc,loss_d_h,loss_d_d" and len(lines) == 5
    assert (root / "run" / "smoothed.csv").read_text().startswith("iter,value")
    ckpt = str(root / "run" / "checkpoints" / "final.agln")

    assert run_command(["eval", "--config", str(cfg), "--out", str(root / "ev"), "--checkpoint", ckpt]) == 0
    m = json.loads((root / "ev" / "metrics.json").read_text())
    assert m["n_tiles"] == 6 and 0 <= m["mean_iou_damaged"] <= 1 and 0 <= m["healthy_fp_rate"] <= 1
    assert "config_digest" in m

    assert run_command(["detect", "--config", str(cfg), "--out", str(root / "det"), "--checkpoint", ckpt,
                        "--input", str(root / "corpus" / "testD"), "--eps", "0.05", "--octagon-r", "1"]) == 0
    for suffix in ("_fake.png", "_diff.pgm", "_mask.png", "_blobs.json", "_panel.png"):
        assert (root / "det" / f"testD_00000{suffix}").is_file()
    run = json.loads((root / "det" / "run.json").read_text())
    assert run["config"]["detect"]["eps"] == 0.05 and run["config"]["detect"]["octagon_r"] == 1


def test_train_is_reproducible(tiny):
    root, cfg = tiny
    for name in ("a", "b"):
        assert run_command(["train", "--config", str(cfg), "--out", str(root / name)]) == 0
    for f in ("checkpoints/final.agln", "checkpoints/ckpt_000002.agln", "loss.csv"):
        assert (root / "a" / f).read_bytes() == (root / "b" / f).read_bytes()


def test_train_resume(tiny):
    root, cfg = tiny
    assert run_command(["train", "--config", str(cfg), "--out", str(root / "full")]) == 0
    assert run_command(["train", "--config", str(cfg), "--out", str(root / "resumed"),
                        "--resume", str(root / "full" / "checkpoints" / "ckpt_000002.agln")]) == 0
    full = (root / "full" / "loss.csv").read_text().splitlines()
    rest = (root / "resumed" / "loss.csv").read_text().splitlines()
    assert rest == [full[0]] + full[3:]
    assert (root / "full" / "checkpoints" / "final.agln").read_bytes() == \
        (root / "resumed" / "checkpoints" / "final.agln").read_bytes()


def test_train_zero_iterations(tiny):
    root, cfg = tiny
    assert run_command(["train", "--config", str(cfg), "--out", str(root / "z"), "--iterations", "0"]) == 0
    assert sorted(p.name for p in (root / "z" / "checkpoints").iterdir()) == ["final.agln"]
    assert load_checkpoint(root / "z" / "checkpoints" / "final.agln").iteration == 0


def test_training_abort_exit_code(tiny, capsys):
    root, cfg = tiny
    hot = root / "hot.ini"
    hot.write_text(cfg.read_text().replace("checkpoint_every = 2", "checkpoint_every = 2\nlr = 1e30"))
    with np.errstate(all="ignore"):
        code = run_command(["train", "--config", str(hot), "--out", str(root / "hot"), "--iterations", "20"])
    assert code == 4
    assert error_line(capsys)["error"] == "training_aborted"
    assert not (root / "hot").exists()


def test_data_error_leaves_no_output(tmp_path, capsys):
    out = tmp_path / "run"
    code = run_command(["train", "--out", str(out), "--corpus", str(tmp_path / "missing")])
    assert code == 3
    assert error_line(capsys)["error"] == "data"
    assert not out.exists()
    assert [p.name for p in tmp_path.iterdir()] == []


def test_failure_keeps_previous_output(tiny, capsys):
    root, cfg = tiny
    before = (root / "corpus" / "manifest.jsonl").read_bytes()
    assert run_command(["eval", "--config", str(cfg), "--out", str(root / "corpus"),
                        "--checkpoint", str(root / "nope.agln")]) == 3
    assert (root / "corpus" / "manifest.jsonl").read_bytes() == before


def test_config_and_usage_errors(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nlambda = -1\n")
    assert run_command(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = error_line(capsys)
    assert err["key"] == "model.lambda" and err["exit"] == 2
    assert run_command(["frobnicate", "--out", "x"]) == 2
    assert error_line(capsys)["error"] == "usage"
    assert run_command(["detect", "--out", str(tmp_path / "d"), "--input", str(tmp_path)]) == 2
    assert error_line(capsys)["key"] == "checkpoint"
    assert run_command(["detect", "--out", str(tmp_path / "d"), "--eps", "-1"]) == 2


def test_lock_file_blocks_second_run(tmp_path, capsys):
    (tmp_path / ".out.lock").write_text("123")
    assert run_command(["synth", "--out", str(tmp_path / "out")]) == 3
    assert error_line(capsys)["error"] == "locked"


def test_prepare_survey_image(tmp_path):
    src = tmp_path / "images"
    src.mkdir()
    yy, xx = np.mgrid[:3000, :6000]
    img = np.stack([(xx // 24) % 256, (yy // 12) % 256, np.full_like(xx, 128)], axis=-1).astype(np.uint8)
    save_png(src / "dam.png", img)
    assert run_command(["prepare", "--input", str(src), "--out", str(tmp_path / "tiles")]) == 0
    tiles = sorted((tmp_path / "tiles" / "tiles").glob("*.png"))
    assert len(tiles) == 253
    records = [json.loads(line) for line in (tmp_path / "tiles" / "manifest.jsonl").read_text().splitlines()]
    assert len(records) == 253
    assert {(r["row"], r["col"]) for r in records} == {(r, c) for r in range(11) for c in range(23)}
    assert all({"file", "source", "row", "col", "domain"} <= set(r) for r in records)


def test_prepare_balances_labelled_domains(tmp_path):
    rng = np.random.default_rng(0)
    for dom, n in (("D", 1), ("H", 2)):
        (tmp_path / "in" / dom).mkdir(parents=True)
        for i in range(n):
            save_png(tmp_path / "in" / dom / f"{dom}{i}.png", rng.integers(0, 256, (40, 70, 3), dtype=np.uint8))
    cfg = tmp_path / "p.ini"
    cfg.write_text(f"[data]\nunit = 16\ninput = {tmp_path / 'in'}\n")
    assert run_command(["prepare", "--config", str(cfg), "--out", str(tmp_path / "out"), "--seed", "3"]) == 0
    # 70x40 at unit 16 -> 4x2 grid -> 8 tiles per image
    assert len(list((tmp_path / "out" / "tiles").glob("*.png"))) == 24
    assert len(list((tmp_path / "out" / "trainD").glob("*.png"))) == 8
    assert len(list((tmp_path / "out" / "trainH").glob("*.png"))) == 8
    ds = [json.loads(line) for line in (tmp_path / "out" / "dataset.jsonl").read_text().splitlines()]
    assert len(ds) == 16 and all(r["seed"] == 3 for r in ds)
