import csv

import numpy as np
import pytest

from vtryon import report
from vtryon.config import ConfigError, default_config, flatten, load_config


def test_default_config_pinned_constants():
    cfg = default_config()
    assert cfg["track"] == {"window_n": 3, "mu": 0.1, "epsilon": 0.05}
    assert cfg["warp"]["lambda_sdc"] == 0.04
    assert cfg["warp"]["lambda_sec"] == 20.0
    assert cfg["tryon"] == {"lambda1": 1.0, "lambda2": 10.0,
                            "lambda3": 1.0, "lambda4": 0.01}
    assert cfg["adam"] == {"lr": 2e-4, "beta1": 0.5, "beta2": 0.999}
    assert cfg["generator"]["channels"] == 256
    assert cfg["generator"]["blocks"] == 8
    assert cfg["generator_tiny"] == {"channels": 96, "blocks": 6}


def test_load_config_overrides_and_types(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("# comment\ntrack.mu = 0.2\nscene.T = 4\n"
                 "generator.patch_sizes = 4, 2\n")
    cfg = load_config(p)
    assert cfg["track"]["mu"] == 0.2
    assert cfg["scene"]["T"] == 4
    assert cfg["generator"]["patch_sizes"] == [4, 2]
    # untouched keys keep defaults
    assert cfg["track"]["window_n"] == 3


def test_load_config_rejects_bad_lines(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("track.mu 0.2\n")
    with pytest.raises(ConfigError, match="expected key = value"):
        load_config(p)
    p.write_text("mu = 0.2\n")
    with pytest.raises(ConfigError, match="section.name"):
        load_config(p)
    p.write_text("track.nonsense = 1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(p)


def test_flatten_round():
    flat = flatten(default_config())
    assert flat["track.mu"] == 0.1
    assert flat["warp.lambda_sec"] == 20.0


def test_write_csv_and_figures(tmp_path):
    path = tmp_path / "m" / "metrics.csv"
    report.write_csv(path, ["a", "b"], [[1, 2], [3, 4]])
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows == [["a", "b"], ["1", "2"], ["3", "4"]]

    fig = tmp_path / "m" / "curve.png"
    report.line_figure(fig, {"x": [1.0, 0.5, 0.25]}, "step", "v", "t", logy=True)
    assert fig.stat().st_size > 0
    assert fig.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    grid = tmp_path / "m" / "grid.png"
    report.image_grid(grid, [np.zeros((8, 8, 3)), np.ones((8, 8))],
                      titles=["a", "b"])
    assert grid.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
