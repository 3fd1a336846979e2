import csv

import pytest
from PIL import Image

from shadowfree import cli
from shadowfree.data import read_image

TINY = ["--set", "base_channels=8", "--set", "blocks_per_level=1,1,1", "--set", "refiner_channels=8",
        "--set", "refiner_blocks=1", "--set", "disc_channels=8", "--set", "batch_size=1"]


def _steps(s1, s2):
    return ["--set", f"stage1_steps={s1}", "--set", f"stage2_steps={s2}"]


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert cli.run(["make-synth", "--count", "2", "--size", "32", "--seed", "0", "--out", str(root)]).exit_code == 0
    return root


@pytest.fixture(scope="module")
def trained(synth, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    res = cli.run(["train", "--data", str(synth), "--out", str(out)] + TINY + _steps(3, 2))
    assert res.exit_code == 0, res.summary
    return out


def test_make_synth_layout(synth):
    assert len(list((synth / "input").glob("*.png"))) == 2
    assert len(list((synth / "gt").glob("*.png"))) == 2


def test_train_outputs(trained):
    assert (trained / "ckpt_stage1_step3.safetensors").is_file()
    assert (trained / "ckpt_stage2_step2.safetensors").is_file()
    rows = list(csv.DictReader(open(trained / "losses.csv")))
    assert [(r["stage"], r["step"]) for r in rows] == [("1", "0"), ("1", "1"), ("1", "2"), ("2", "0"), ("2", "1")]
    assert all(float(r["adv"]) == 0.0 for r in rows if r["stage"] == "2")


def test_train_stage2_from_stage1_checkpoint(synth, trained, tmp_path):
    res = cli.run(["train", "--data", str(synth), "--out", str(tmp_path), "--stage", "2",
                   "--resume", str(trained / "ckpt_stage1_step3.safetensors")] + TINY + _steps(3, 2))
    assert res.exit_code == 0, res.summary
    assert (tmp_path / "ckpt_stage2_step2.safetensors").read_bytes() == \
        (trained / "ckpt_stage2_step2.safetensors").read_bytes()


def test_stage2_without_checkpoint_is_config_error(synth, tmp_path):
    res = cli.run(["train", "--data", str(synth), "--out", str(tmp_path), "--stage", "2"] + TINY)
    assert res.exit_code == 2


def test_resume_with_mismatched_config(synth, trained, tmp_path):
    res = cli.run(["train", "--data", str(synth), "--out", str(tmp_path), "--stage", "2",
                   "--resume", str(trained / "ckpt_stage1_step3.safetensors"), "--set", "base_channels=16"])
    assert res.exit_code == 2 and "base_channels" in res.summary


def test_evaluate(synth, trained, tmp_path):
    out = tmp_path / "report.csv"
    res = cli.run(["evaluate", "--data", str(synth), "--ckpt", str(trained / "ckpt_stage2_step2.safetensors"),
                   "--out", str(out)])
    assert res.exit_code == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["id"] for r in rows] == ["0000", "0001"] and set(rows[0]) == {"id", "psnr_db", "ssim"}


def test_evaluate_lpips_flag_without_backend(synth, trained, tmp_path):
    res = cli.run(["evaluate", "--data", str(synth), "--ckpt", str(trained / "ckpt_stage2_step2.safetensors"),
                   "--out", str(tmp_path / "r.csv"), "--with-lpips"])
    assert res.exit_code == 2 and "lpips" in res.summary


def test_evaluate_with_lpips_backend(synth, trained, tmp_path):
    backend = tmp_path / "lp.py"
    backend.write_text("def lpips(a, b):\n    return float((a - b).abs().mean())\n")
    out = tmp_path / "r.csv"
    res = cli.run(["evaluate", "--data", str(synth), "--ckpt", str(trained / "ckpt_stage2_step2.safetensors"),
                   "--out", str(out), "--with-lpips", "--lpips-backend", str(backend)])
    assert res.exit_code == 0
    assert open(out).readline().strip() == "id,psnr_db,ssim,lpips"


def test_infer_single_and_directory(trained, tmp_path):
    img = tmp_path / "odd.png"
    Image.new("RGB", (100, 100), (120, 80, 40)).save(img)
    ckpt = str(trained / "ckpt_stage2_step2.safetensors")
    assert cli.run(["infer", "--input", str(img), "--ckpt", ckpt, "--out", str(tmp_path / "o1")]).exit_code == 0
    assert read_image(tmp_path / "o1" / "odd.png").shape == (1, 3, 100, 100)
    (tmp_path / "dir").mkdir()
    for name in ("b.png", "c.png"):
        Image.new("RGB", (40, 24), (10, 200, 90)).save(tmp_path / "dir" / name)
    res = cli.run(["infer", "--input", str(tmp_path / "dir"), "--ckpt", ckpt, "--out", str(tmp_path / "o2")])
    assert res.exit_code == 0 and len(res.artifacts) == 2


@pytest.mark.parametrize("argv, code", [
    (["infer", "--input", "/nonexistent.png", "--ckpt", "CKPT", "--out", "OUT"], 5),
    (["infer", "--input", "IMG", "--ckpt", "/nonexistent.safetensors", "--out", "OUT"], 5),
    (["train", "--data", "EMPTY", "--out", "OUT"], 3),
    (["train", "--data", "SYNTH", "--out", "OUT", "--set", "no_such_key=1"], 2),
    (["make-synth", "--count", "1", "--size", "8", "--out", "OUT"], 3),
])
def test_exit_codes(argv, code, synth, trained, tmp_path):
    (tmp_path / "empty" / "input").mkdir(parents=True)
    (tmp_path / "empty" / "gt").mkdir()
    Image.new("RGB", (16, 16)).save(tmp_path / "img.png")
    subs = {"CKPT": str(trained / "ckpt_stage2_step2.safetensors"), "OUT": str(tmp_path / "out"),
            "EMPTY": str(tmp_path / "empty"), "SYNTH": str(synth), "IMG": str(tmp_path / "img.png")}
    assert cli.run([subs.get(a, a) for a in argv]).exit_code == code


def test_corrupt_checkpoint_exit_code(tmp_path):
    bad = tmp_path / "bad.safetensors"
    bad.write_bytes(b"nope")
    Image.new("RGB", (16, 16)).save(tmp_path / "img.png")
    res = cli.run(["infer", "--input", str(tmp_path / "img.png"), "--ckpt", str(bad), "--out", str(tmp_path)])
    assert res.exit_code == 2 and "corrupt" in res.summary


def test_ablate_smoke_and_determinism(synth, tmp_path):
    argv = ["ablate", "--data", str(synth), "--steps", "2"] + TINY
    a = cli.run(argv + ["--out", str(tmp_path / "a")])
    b = cli.run(argv + ["--out", str(tmp_path / "b")])
    assert a.exit_code == b.exit_code == 0
    text = (tmp_path / "a" / "ablation.csv").read_text()
    assert text == (tmp_path / "b" / "ablation.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    assert [r["configuration"] for r in rows] == list(cli.ABLATIONS)
    assert set(rows[0]) == {"configuration", "psnr_db", "ssim"}


def test_selfcheck_green(capsys):
    assert cli.main(["selfcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "ffa_fft_vs_naive_dft" in out


def test_selfcheck_elementwise():
    assert cli.run(["selfcheck", "--ffa-variant", "elementwise"]).exit_code == 0


def test_selfcheck_corrupted_dft_sign(capsys):
    res = cli.run(["selfcheck", "--corrupt-dft-sign"])
    assert res.exit_code == 4 and "ffa_fft_vs_naive_dft" in res.summary
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("FAIL")]
    assert lines and all("ffa_fft_vs_naive_dft" in l for l in lines)
