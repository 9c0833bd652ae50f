import numpy as np
import pytest

from vtryon import cli
from vtryon.cft import read_tensor


@pytest.fixture()
def fast_cfg(tmp_path):
    p = tmp_path / "fast.cfg"
    p.write_text(
        "scene.T = 4\nscene.H = 48\nscene.W = 40\n"
        "warp.tps_steps = 15\nwarp.flow_steps = 15\nwarp.flow_scales = 2\n"
        "toy.train_steps = 5\n"
    )
    return str(p)


def _run(*argv):
    return cli.main(list(argv))


def test_no_command_is_usage_error(capsys):
    assert _run() == cli.EXIT_USAGE


def test_unknown_command_is_usage_error(capsys):
    assert _run("frobnicate") == cli.EXIT_USAGE
    assert _run("synth", "--bogus-flag") == cli.EXIT_USAGE


def test_missing_out_is_usage_error(capsys, fast_cfg):
    assert _run("synth", "--config", fast_cfg) == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert "requires --out" in err


def test_synth_writes_bundle_and_is_deterministic(tmp_path, fast_cfg, capsys):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert _run("synth", "--config", fast_cfg, "--seed", "5", "--out", a) == 0
    assert _run("synth", "--config", fast_cfg, "--seed", "5", "--out", b) == 0
    fa = (tmp_path / "a" / "frames.cft").read_bytes()
    fb = (tmp_path / "b" / "frames.cft").read_bytes()
    assert fa == fb
    c = str(tmp_path / "c")
    assert _run("synth", "--config", fast_cfg, "--seed", "6", "--out", c) == 0
    assert fa != (tmp_path / "c" / "frames.cft").read_bytes()


def test_missing_bundle_is_data_error(tmp_path, capsys):
    code = _run("warp-fit", str(tmp_path / "nothing"), "--out",
                str(tmp_path / "o"))
    assert code == cli.EXIT_DATA


def test_bad_config_file_is_data_error(tmp_path, capsys):
    cfgp = tmp_path / "bad.cfg"
    cfgp.write_text("warp.banana = 1\n")
    assert _run("synth", "--config", str(cfgp), "--out",
                str(tmp_path / "o")) == cli.EXIT_DATA


def test_track_requires_flows_role(tmp_path, fast_cfg, capsys):
    scene = str(tmp_path / "scene")
    assert _run("synth", "--config", fast_cfg, "--out", scene) == 0
    # bundle synthesized without --noise-sigma has no 'flows' role
    assert _run("track", scene, "--out", str(tmp_path / "t")) == cli.EXIT_DATA
    assert "missing role: flows" in capsys.readouterr().err


def test_track_writes_outputs(tmp_path, fast_cfg, capsys):
    scene = str(tmp_path / "scene")
    assert _run("synth", "--config", fast_cfg, "--noise-sigma", "0.01",
                "--out", scene) == 0
    out = tmp_path / "tracked"
    assert _run("track", scene, "--config", fast_cfg, "--out", str(out)) == 0
    assert (out / "flows_tracked.cft").exists()
    assert (out / "jitter.csv").exists()
    assert (out / "jitter.png").exists()
    tracked = read_tensor(out / "flows_tracked.cft")
    assert tracked.shape == (4, 48, 40, 2)


def test_track_flag_overrides_change_result(tmp_path, fast_cfg, capsys):
    scene = str(tmp_path / "scene")
    assert _run("synth", "--config", fast_cfg, "--noise-sigma", "0.01",
                "--out", scene) == 0
    o1, o2 = tmp_path / "t1", tmp_path / "t2"
    assert _run("track", scene, "--config", fast_cfg, "--out", str(o1)) == 0
    assert _run("track", scene, "--config", fast_cfg, "--mu", "5.0",
                "--window", "2", "--out", str(o2)) == 0
    a = read_tensor(o1 / "flows_tracked.cft")
    b = read_tensor(o2 / "flows_tracked.cft")
    assert not np.array_equal(a, b)


def test_metrics_command(tmp_path, fast_cfg, capsys):
    scene = tmp_path / "scene"
    assert _run("synth", "--config", fast_cfg, "--out", str(scene)) == 0
    out = tmp_path / "m"
    assert _run("metrics", str(scene / "frames.cft"), str(scene / "frames.cft"),
                "--out", str(out)) == 0
    assert "mean ssim=1.0" in capsys.readouterr().out
    assert (out / "metrics.csv").exists()
    assert (out / "ssim.png").exists()


def test_metrics_shape_mismatch_is_data_error(tmp_path, fast_cfg, capsys):
    scene = tmp_path / "scene"
    assert _run("synth", "--config", fast_cfg, "--out", str(scene)) == 0
    assert _run("metrics", str(scene / "frames.cft"), str(scene / "seg.cft"),
                "--out", str(tmp_path / "m")) == cli.EXIT_DATA


def test_nan_input_is_numeric_error(tmp_path, fast_cfg, capsys):
    from vtryon.cft import write_tensor

    scene = tmp_path / "scene"
    assert _run("synth", "--config", fast_cfg, "--out", str(scene)) == 0
    clothes = read_tensor(scene / "clothes.cft")
    write_tensor(scene / "clothes.cft", np.full_like(clothes, np.nan))
    with np.errstate(invalid="ignore"):
        code = _run("warp-fit", str(scene), "--config", fast_cfg,
                    "--out", str(tmp_path / "wf"))
    assert code == cli.EXIT_NUMERIC


def test_train_toy_writes_artifacts(tmp_path, fast_cfg, capsys):
    out = tmp_path / "toy"
    assert _run("train-toy", "--config", fast_cfg, "--out", str(out)) == 0
    assert (out / "loss.csv").exists()
    assert (out / "loss.png").exists()


def test_warp_fit_and_tryon(tmp_path, fast_cfg, capsys):
    scene = str(tmp_path / "scene")
    assert _run("synth", "--config", fast_cfg, "--velocity", "0,1",
                "--out", scene) == 0

    wf = tmp_path / "wf"
    assert _run("warp-fit", scene, "--config", fast_cfg, "--out", str(wf)) == 0
    assert read_tensor(wf / "flows_raw.cft").shape == (4, 48, 40, 2)

    tr = tmp_path / "tryon"
    assert _run("tryon", scene, "--config", fast_cfg, "--out", str(tr)) == 0
    for name in ("output.cft", "metrics.csv", "ssim.png", "frames.png"):
        assert (tr / name).exists(), name
    assert "mean ssim=" in capsys.readouterr().out
