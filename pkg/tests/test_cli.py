import csv
import json

import numpy as np
import pytest

from timotion import cli
from timotion.data import load_dataset
from timotion.denoiser import load_checkpoint
from timotion.errors import UsageError


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "train.timd"
    assert run("gen-data", "--count", 6, "--length", 16, "--seed", 3, "--out", data) == cli.EXIT_OK
    model = root / "model"
    code = run("train", "--dataset", data, "--steps", 3, "--width", 8, "--blocks", 1, "--heads", 2,
               "--batch-size", 2, "--diffusion-steps", 50, "--seed", 0, "--out", model)
    assert code == cli.EXIT_OK
    return root, data, model / "model.ckpt"


def test_gen_data_writes_dataset_and_manifest(workspace):
    _, data, _ = workspace
    pairs, n_joints = load_dataset(data)
    assert len(pairs) == 6 and n_joints == 5
    manifest = json.loads(data.with_name(data.name + ".json").read_text())
    assert manifest["count"] == 6 and manifest["seed"] == 3


def test_gen_data_empty(tmp_path):
    out = tmp_path / "empty.timd"
    assert run("gen-data", "--count", 0, "--out", out) == cli.EXIT_OK
    pairs, _ = load_dataset(out)
    assert pairs == []


def test_gen_data_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--count", 4, "--length", 12, "--seed", 9, "--out", tmp_path / f"{name}.timd") == 0
    assert (tmp_path / "a.timd").read_bytes() == (tmp_path / "b.timd").read_bytes()
    assert (tmp_path / "a.timd.json").read_bytes() == (tmp_path / "b.timd.json").read_bytes()


def test_gen_data_single_scenario(tmp_path):
    out = tmp_path / "one.timd"
    assert run("gen-data", "--count", 3, "--length", 8, "--scenario", "mirror_dance", "--out", out) == 0
    assert len({p.tokens for p in load_dataset(out)[0]}) == 1
    assert run("gen-data", "--scenario", "juggling", "--out", out) == cli.EXIT_USAGE


def test_train_outputs(workspace):
    _, _, ckpt = workspace
    model, step = load_checkpoint(ckpt)
    assert step == 3 and model.config.width == 8
    rows = list(csv.reader((ckpt.parent / "loss.csv").open()))
    assert rows[0][:3] == ["step", "lr", "total"] and len(rows) == 4


def test_train_zero_steps_is_initialization(workspace, tmp_path):
    from timotion.denoiser import Denoiser

    _, data, _ = workspace
    assert run("train", "--dataset", data, "--steps", 0, "--width", 8, "--blocks", 1, "--heads", 2, "--seed", 4, "--out", tmp_path) == 0
    model, step = load_checkpoint(tmp_path / "model.ckpt")
    fresh = Denoiser(model.config, 4)
    assert step == 0
    for (k, v), (k2, v2) in zip(sorted(model.state_dict().items()), sorted(fresh.state_dict().items())):
        assert k == k2 and np.array_equal(v, v2)


def test_train_is_deterministic(workspace, tmp_path):
    _, data, _ = workspace
    args = ["--dataset", data, "--steps", 2, "--width", 8, "--blocks", 1, "--heads", 2, "--batch-size", 2, "--seed", 1]
    for name in ("a", "b"):
        assert run("train", *args, "--out", tmp_path / name) == 0
    assert (tmp_path / "a/loss.csv").read_bytes() == (tmp_path / "b/loss.csv").read_bytes()
    assert (tmp_path / "a/model.ckpt").read_bytes() == (tmp_path / "b/model.ckpt").read_bytes()


def test_train_missing_dataset(tmp_path):
    assert run("train", "--dataset", tmp_path / "none.timd", "--out", tmp_path) == cli.EXIT_IO


def test_sample_deterministic(workspace, tmp_path):
    _, _, ckpt = workspace
    args = ["--checkpoint", ckpt, "--length", 16, "--steps", 4, "--diffusion-steps", 50, "--count", 2, "--seed", 5]
    for name in ("a", "b"):
        assert run("sample", *args, "--out", tmp_path / f"{name}.timd") == 0
    assert (tmp_path / "a.timd").read_bytes() == (tmp_path / "b.timd").read_bytes()
    manifest = json.loads((tmp_path / "a.timd.json").read_text())
    assert manifest["seed"] == 5 and manifest["count"] == 2


def test_sample_unconditional_path(workspace, tmp_path):
    _, _, ckpt = workspace
    out = tmp_path / "u.timd"
    assert run("sample", "--checkpoint", ckpt, "--length", 16, "--steps", 3, "--diffusion-steps", 50, "--guidance", 0, "--out", out) == 0
    pairs, _ = load_dataset(out)
    assert np.all(np.isfinite(pairs[0].x_a))


def test_sample_vocabulary_mismatch(workspace, tmp_path):
    _, _, ckpt = workspace
    code = run("sample", "--checkpoint", ckpt, "--tokens", "99999", "--length", 16, "--out", tmp_path / "x.timd")
    assert code == cli.EXIT_USAGE


def test_inbetween_keeps_prefix_and_suffix(workspace, tmp_path):
    _, data, ckpt = workspace
    out = tmp_path / "ib.timd"
    code = run("inbetween", "--checkpoint", ckpt, "--dataset", data, "--index", 2, "--alpha", 0.1,
               "--steps", 4, "--diffusion-steps", 50, "--out", out)
    assert code == 0
    gt = load_dataset(data)[0][2]
    result = load_dataset(out)[0][0]
    n = 2  # ceil(16 * 0.1)
    for got, ref in ((result.x_a, gt.x_a), (result.x_b, gt.x_b)):
        assert np.array_equal(got[:n], ref[:n])
        assert np.array_equal(got[-n:], ref[-n:])
        assert not np.array_equal(got[n:-n], ref[n:-n])


def test_inbetween_bad_index(workspace, tmp_path):
    _, data, ckpt = workspace
    assert run("inbetween", "--checkpoint", ckpt, "--dataset", data, "--index", 6, "--out", tmp_path / "x.timd") == cli.EXIT_USAGE


def test_gradcheck_subset(capsys):
    assert run("gradcheck", "--only", "primitive/matmul,mixing/wkv") == cli.EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and all(line.startswith("PASS") for line in lines)


def test_gradnorm_report_and_threshold(tmp_path, capsys):
    out = tmp_path / "g.csv"
    assert run("gradnorm", "--trials", 40, "--out", out) == cli.EXIT_OK
    payload = json.loads((tmp_path / "g.csv.json").read_text())
    assert payload["trials"] == 40 and payload["fraction"] >= 0.9
    assert "fraction(II > I)" in capsys.readouterr().out
    assert run("gradnorm", "--trials", 10, "--threshold", 1.01) == cli.EXIT_CHECK


def test_spectrum_command(workspace, tmp_path, capsys):
    _, _, ckpt = workspace
    out = tmp_path / "s.csv"
    code = run("spectrum", "--checkpoint", ckpt, "--count", 2, "--length", 16, "--steps", 3, "--diffusion-steps", 50, "--out", out)
    assert code == 0
    value = json.loads((tmp_path / "s.csv.json").read_text())["proportion"]
    assert 0.0 <= value <= 1.0
    assert "mean high-frequency proportion" in capsys.readouterr().out
    assert run("spectrum", "--checkpoint", ckpt, "--length", 64) == cli.EXIT_USAGE


def test_params_table(capsys):
    assert run("params", "--width", 64) == cli.EXIT_OK
    text = capsys.readouterr().out
    for name in ("separate", "cii", "cii+res", "cii+res+lpa"):
        assert name in text
    assert "holds" in text


# ---------------------------------------------------------------- settings and exit codes


def test_usage_errors():
    assert run() == cli.EXIT_USAGE
    assert run("nonsense") == cli.EXIT_USAGE
    assert run("gen-data", "--count", "many") == cli.EXIT_USAGE
    assert run("gen-data", "--count", -1) == cli.EXIT_USAGE


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# dataset settings\ncount = 3\nlength = 10  # short\nseed=7\n")
    out = tmp_path / "d.timd"
    assert cli.main(["--config", str(cfg), "gen-data", "--count", "2", "--out", str(out)]) == 0
    pairs, _ = load_dataset(out)
    assert len(pairs) == 2 and pairs[0].length == 10
    assert json.loads(out.with_name(out.name + ".json").read_text())["seed"] == 7


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("count = 3\nlearning_rate = 0.1\n")
    assert cli.main(["--config", str(cfg), "gen-data", "--out", str(tmp_path / "x.timd")]) == cli.EXIT_USAGE
    cfg.write_text("just words\n")
    assert cli.main(["--config", str(cfg), "gen-data"]) == cli.EXIT_USAGE


def test_missing_config_file(tmp_path):
    assert cli.main(["--config", str(tmp_path / "none.cfg"), "params"]) == cli.EXIT_IO


def test_seed_environment_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("TIMOTION_SEED", "5")
    out = tmp_path / "d.timd"
    assert run("gen-data", "--count", 1, "--length", 8, "--out", out) == 0
    assert json.loads(out.with_name(out.name + ".json").read_text())["seed"] == 5
    assert cli.resolve_settings("gradcheck", {"seed": 2}, {})["seed"] == 2


def test_resolve_settings_booleans():
    s = cli.resolve_settings("gradnorm", {}, {"orthonormal": "yes"})
    assert s["orthonormal"] is True
    with pytest.raises(UsageError):
        cli.resolve_settings("gradnorm", {}, {"orthonormal": "maybe"})
