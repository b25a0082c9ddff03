import json
import os

import numpy as np
import pytest

from repeatdenoise.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main
from repeatdenoise.config import ConfigError, config_to_dict, load_config, parse_config
from repeatdenoise.io import read_slice, read_volume, write_volume
from repeatdenoise.n2n import DenoiserNet, NetDescriptor, save_model
from repeatdenoise.phantom import PhantomSpec, generate_clean
from repeatdenoise.pipeline import STAGES, PipelineLockedError, derive_seed, run_pipeline
from repeatdenoise.views import export_views, volume_views
from repeatdenoise.volume import Volume3D

SMOKE = {
    "seed": 1,
    "phantom": {"subjects": 2, "repeats": 3, "dims": [48, 48, 8], "vessel_count": 6},
    "registration": {"levels": [0.25, 0.5, 1.0], "iters_per_level": [6, 4, 2]},
    "template": {"outer_iters": 1},
    "network": {"depth": 2, "channels": [4, 8]},
    "train": {"epochs": 1},
}


def _write_config(path, out_dir, base=SMOKE, **extra):
    cfg = dict(base, output_dir=str(out_dir), **extra)
    path.write_text(json.dumps(cfg))
    return path


# -- configuration -------------------------------------------------------------


def test_defaults_match_documented_values():
    cfg = parse_config({})
    assert cfg.seed == 0 and cfg.threads == 1
    assert cfg.template.outer_iters == 3
    assert cfg.pairs.crop == 128
    assert cfg.train.lr == 2e-4 and cfg.train.batch_size == 4
    assert (cfg.train.beta1, cfg.train.beta2) == (0.9, 0.999)
    assert tuple(cfg.registration.iters_per_level) == (50, 25, 10, 10)
    assert cfg.registration.lncc_radius == 3
    assert (cfg.metrics.patch, cfg.metrics.tau) == (8, 0.5)
    assert cfg.phantom.subjects == 2 and cfg.phantom.repeats == 3


def test_unknown_keys_are_named():
    with pytest.raises(ConfigError, match="'bogus'"):
        parse_config({"bogus": 1})
    with pytest.raises(ConfigError, match="'train.momentum'"):
        parse_config({"train": {"momentum": 0.9}})


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        parse_config({"train": {"epochs": "ten"}})
    with pytest.raises(ConfigError):
        parse_config({"phantom": {"repeats": 1}})
    with pytest.raises(ConfigError):
        parse_config({"baselines": ["bm3d"]})
    with pytest.raises(ConfigError):
        parse_config({"phantom": None})


def test_config_roundtrip_through_dict():
    cfg = parse_config(SMOKE)
    assert parse_config(json.loads(json.dumps(config_to_dict(cfg)))) == cfg


def test_load_config_reports_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_derive_seed_is_stable_and_key_dependent():
    assert derive_seed(3, "pairs") == derive_seed(3, "pairs")
    assert derive_seed(3, "pairs") != derive_seed(3, "net")
    assert derive_seed(3, "pairs") != derive_seed(4, "pairs")


# -- views -----------------------------------------------------------------------


def test_constant_volume_gives_uniform_views(tmp_path):
    v = Volume3D(np.full((10, 12, 6), 0.25, np.float32))
    paths = export_views(v, tmp_path, window=(0.0, 1.0))
    assert set(paths) == {"xy", "xz", "enface"}
    for p in paths.values():
        data = read_slice(p).data
        assert np.ptp(data) == 0
        assert data.flat[0] == pytest.approx(0.25, abs=1 / 255)


def test_enface_of_bright_slab():
    data = np.zeros((8, 8, 10))
    data[:, :, 3:6] = 2.0
    assert volume_views(Volume3D(data))["enface"] == pytest.approx(np.full((8, 8), 2.0 * 3 / 10))


def test_views_reload_within_quantisation(tmp_path):
    v = generate_clean(PhantomSpec(dims=(24, 20, 8), vessel_count=3))
    lo, hi = float(v.data.min()), float(v.data.max())
    paths = export_views(v, tmp_path)
    ref = volume_views(v)
    for name, p in paths.items():
        assert read_slice(p).data.shape == ref[name].shape
        assert np.abs(read_slice(p).data - ref[name]).max() <= (hi - lo) / 255 + 1e-6
        assert json.loads(p.with_suffix(".json").read_text())


# -- command line ------------------------------------------------------------------


def test_cli_unknown_key_exits_2(tmp_path, capsys):
    cfg = _write_config(tmp_path / "c.json", tmp_path / "run", bogus=True)
    assert main(["pipeline", "--config", str(cfg)]) == EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err


def test_cli_missing_input_exits_3(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"output_dir": str(tmp_path / "run"), "phantom": None,
                               "inputs": [[str(tmp_path / "a.mhd"), str(tmp_path / "b.mhd")]]}))
    assert main(["prefilter", "--config", str(cfg)]) == EXIT_STAGE
    assert "prefilter" in capsys.readouterr().err


def test_cli_locked_directory_exits_3(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    (run / ".lock").write_text(str(os.getpid()))
    cfg = _write_config(tmp_path / "c.json", run)
    assert main(["phantom", "--config", str(cfg)]) == EXIT_STAGE
    with pytest.raises(PipelineLockedError):
        run_pipeline(load_config(cfg), until="phantom")


def test_stale_lock_is_replaced(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    (run / ".lock").write_text("999999999")
    cfg = _write_config(tmp_path / "c.json", run)
    assert main(["phantom", "--config", str(cfg)]) == EXIT_OK
    assert not (run / ".lock").exists()


def test_cli_register_writes_warp_triple(tmp_path):
    fixed = generate_clean(PhantomSpec(dims=(32, 32, 8), vessel_count=4, seed=1))
    moving = Volume3D(np.roll(fixed.data, 1, axis=0), fixed.spacing)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"registration": {"levels": [0.5, 1.0], "iters_per_level": [5, 3]}}))
    a, b = write_volume(fixed, tmp_path / "f.mhd"), write_volume(moving, tmp_path / "m.mhd")
    assert main(["register", str(a), str(b), "--out", str(tmp_path / "reg"), "--config", str(cfg)]) == EXIT_OK
    for name in ("velocity", "forward", "inverse", "warped"):
        assert read_volume(tmp_path / "reg" / f"{name}.mhd").dims[:3] == fixed.dims
    summary = json.loads((tmp_path / "reg" / "summary.json").read_text())
    assert summary["min_jacobian"] > 0


def test_cli_denoise_file_mode(tmp_path):
    net = DenoiserNet(NetDescriptor(1, (2,)), init="identity")
    save_model(net, tmp_path / "m")
    src = write_volume(Volume3D(np.random.default_rng(0).random((9, 10, 3)).astype(np.float32)), tmp_path / "in.mhd")
    out = tmp_path / "out.mhd"
    assert main(["denoise", "--model", str(tmp_path / "m"), "--input", str(src), "--output", str(out)]) == EXIT_OK
    assert read_volume(out).dims == (9, 10, 3)
    assert main(["denoise", "--model", str(tmp_path / "m")]) == EXIT_CONFIG


def test_cli_export(tmp_path):
    src = write_volume(Volume3D(np.ones((6, 6, 4), np.float32)), tmp_path / "v.mhd")
    assert main(["export", str(src), "--out", str(tmp_path / "views")]) == EXIT_OK
    assert sorted(p.name for p in (tmp_path / "views").glob("*.png")) == ["enface.png", "xy.png", "xz.png"]


# -- smoke pipeline ------------------------------------------------------------------


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("smoke")
    cfg = _write_config(base / "c.json", base / "run")
    assert main(["pipeline", "--config", str(cfg)]) == EXIT_OK
    return base, cfg


def test_smoke_pipeline_outputs(smoke_run):
    base, _ = smoke_run
    run = base / "run"
    for d in ("template", "warped", "model", "baselines", "views"):
        assert (run / d).is_dir(), d
    assert (run / "report.csv").exists()
    for stage in STAGES:
        man = json.loads((run / stage / "manifest.json").read_text())
        assert man["stage"] == stage and man["config"]["seed"] == 1
    pairs = json.loads((run / "pairs" / "pairs.json").read_text())
    assert pairs["crop"] == 48  # default 128 clamped to the slice size
    assert pairs["count"] == 2 * 3 * 2 * 8
    summary = json.loads((run / "evaluate" / "summary.json").read_text())
    assert {"noisy", "ours", "nlm", "affine_average", "affine_n2n"} <= set(summary)


def test_rerun_skips_every_stage(smoke_run, capsys):
    _, cfg = smoke_run
    capsys.readouterr()
    assert main(["pipeline", "--config", str(cfg)]) == EXIT_OK
    lines = capsys.readouterr().out.split()
    assert lines.count("skipped") == len(STAGES)
    assert "ran" not in lines


def test_resumed_run_matches_cold_run(smoke_run, tmp_path):
    base, _ = smoke_run
    cfg = _write_config(tmp_path / "c.json", tmp_path / "run")
    assert main(["pair", "--config", str(cfg)]) == EXIT_OK
    assert main(["pipeline", "--config", str(cfg)]) == EXIT_OK
    for rel in ("model/model.bin", "report.csv", "baselines/affine_n2n/model.bin", "denoised/subject01/repeat02.raw"):
        assert (tmp_path / "run" / rel).read_bytes() == (base / "run" / rel).read_bytes(), rel


def test_changed_training_param_reruns_only_downstream(smoke_run, tmp_path, capsys):
    base, _ = smoke_run
    import shutil

    shutil.copytree(base / "run", tmp_path / "run")
    changed = dict(SMOKE, train={"epochs": 1, "lr": 1e-3})
    cfg = _write_config(tmp_path / "c.json", tmp_path / "run", base=changed)
    capsys.readouterr()
    assert main(["pipeline", "--config", str(cfg)]) == EXIT_OK
    status = dict(line.split(": ") for line in capsys.readouterr().out.strip().splitlines())
    assert all(status[s] == "skipped" for s in ("phantom", "prefilter", "template", "transport", "pair"))
    assert status["train"] == "ran"
