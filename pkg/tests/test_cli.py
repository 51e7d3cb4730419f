import configparser
import csv

import numpy as np
import pytest

from dier.cli import load_run_config, main, parse_grid
from dier.data import read_pnm, synth_shapes, write_idx
from dier.errors import ConfigError
from dier.store import import_embeddings

TINY = """
[data]
classes = 4
size = 8
per_class = 6
test_per_class = 3

[train]
epochs = 2
batch_size = 8
learning_rate = 1e-3
seed = 5

[probe]
epochs = 3
warmup_epochs = 1
batch_size = 16
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    assert main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root, cfg, root / "run" / "final.dier"


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# -- grid and config -------------------------------------------------------

def test_default_grid_is_eleven_points():
    assert parse_grid("0:999:100") == [0, 100, 200, 300, 400, 500, 600, 700, 800, 900, 999]


def test_degenerate_grid():
    assert parse_grid("0:0:1") == [0]


@pytest.mark.parametrize("text", ["0:1000:100", "5:1", "a:b:c", "0:10:0", "10:0:1"])
def test_bad_grid(text):
    with pytest.raises(ConfigError):
        parse_grid(text)


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nlearning_rat = 1e-4\n")
    with pytest.raises(ConfigError, match="learning_rat"):
        load_run_config(p)


def test_unknown_section_rejected(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[optim]\nlr = 1\n")
    with pytest.raises(ConfigError):
        load_run_config(p)


def test_config_overrides_and_probe_lr():
    cfg = load_run_config(None, {"train": {"learning_rate": 3e-4, "seed": None}})
    assert cfg.train.learning_rate == 3e-4
    assert cfg.probe_config.peak_lr == pytest.approx(6e-4)


# -- exit codes ------------------------------------------------------------

def test_unknown_subcommand_is_usage(capsys):
    assert main(["bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_required_flag_is_usage():
    assert main(["sweep", "--out", "x"]) == 1


def test_missing_data_path(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o"), "--epochs", "1"])
    assert code == 3
    assert "not found" in capsys.readouterr().err


def test_bad_config_value(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nepochs = 0\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_missing_checkpoint(tmp_path):
    assert main(["sweep", "--checkpoint", str(tmp_path / "none.dier"), "--out", str(tmp_path)]) == 5


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.dier"
    bad.write_bytes(b"DIER\x01\x00\x00\x00garbage")
    assert main(["probe", "--checkpoint", str(bad), "--t", "0", "--out", str(tmp_path)]) == 5


# -- commands on a tiny run ------------------------------------------------

def test_train_outputs(run):
    root, _, ckpt = run
    out = root / "run"
    assert ckpt.exists()
    rows = read_rows(out / "loss.csv")
    assert [int(r["step"]) for r in rows] == list(range(1, 7))
    ini = configparser.ConfigParser()
    ini.read(out / "effective_config.ini")
    assert ini["train"]["seed"] == "5"


def test_train_repeat_identical_trace(run, tmp_path):
    root, cfg, _ = run
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    strip = lambda rows: [(r["step"], r["loss"], r["lr"]) for r in rows]  # noqa: E731
    assert strip(read_rows(tmp_path / "loss.csv")) == strip(read_rows(root / "run" / "loss.csv"))


def test_probe_prints_top1_only_for_four_classes(run, tmp_path, capsys):
    _, cfg, ckpt = run
    assert main(["probe", "--checkpoint", str(ckpt), "--config", str(cfg), "--t", "100",
                 "--out", str(tmp_path)]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("top1=") and "top5" not in line
    rows = read_rows(tmp_path / "probe_t100.csv")
    assert float(rows[0]["top1"]) == pytest.approx(float(line.split("=")[1]), abs=1e-4)


def test_probe_t_out_of_range(run, tmp_path):
    _, cfg, ckpt = run
    assert main(["probe", "--checkpoint", str(ckpt), "--t", "1000", "--out", str(tmp_path)]) == 2
    assert main(["probe", "--checkpoint", str(ckpt), "--t", "-1", "--out", str(tmp_path)]) == 2


def test_sweep_summary_matches_csv(run, tmp_path, capsys):
    _, cfg, ckpt = run
    assert main(["sweep", "--checkpoint", str(ckpt), "--config", str(cfg), "--t-grid", "0:999:500",
                 "--out", str(tmp_path)]) == 0
    line = capsys.readouterr().out.strip()
    rows = read_rows(tmp_path / "sweep.csv")
    assert [int(r["t"]) for r in rows] == [0, 500, 999]
    accs = [float(r["top1"]) for r in rows]
    best = max(range(len(rows)), key=lambda i: (accs[i], -i))
    assert line == f"best_t={rows[best]['t']} top1={accs[best]:.4f}"


def test_reconstruct_counts_and_determinism(run, tmp_path, capsys):
    _, cfg, ckpt = run
    args = ["reconstruct", "--checkpoint", str(ckpt), "--config", str(cfg), "--mode", "noise",
            "--n", "8", "--steps", "5", "--seed", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = read_pnm(tmp_path / "a" / "reconstruct_noise.ppm")
    assert a.shape == (8 * 8, 2 * 8, 3)
    assert a.tobytes() == read_pnm(tmp_path / "b" / "reconstruct_noise.ppm").tobytes()
    assert len(read_rows(tmp_path / "a" / "reconstruct_noise_psnr.csv")) == 8


def test_export_roundtrip(run, tmp_path):
    _, cfg, ckpt = run
    assert main(["export-embeddings", "--checkpoint", str(ckpt), "--config", str(cfg), "--t", "200",
                 "--format", "bin", "--out", str(tmp_path)]) == 0
    vec, lab = import_embeddings(tmp_path / "embeddings_test_t200.bin")
    assert vec.shape == (12, 128)
    np.testing.assert_array_equal(lab, synth_shapes(3, 4, 8, seed=1).labels)


def test_idx_directory_as_data(run, tmp_path):
    _, cfg, _ = run
    ds = synth_shapes(4, 4, 8, seed=0)
    write_idx(ds, tmp_path / "train-images-idx3-ubyte", tmp_path / "train-labels-idx1-ubyte")
    write_idx(ds, tmp_path / "t10k-images-idx3-ubyte", tmp_path / "t10k-labels-idx1-ubyte")
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path), "--max-steps", "2",
                 "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "final.dier").exists()


def test_selfcheck_passes(capsys):
    assert main(["selfcheck"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4 and all(line.startswith("PASS") for line in lines)
