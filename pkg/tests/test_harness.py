import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from nrgan import harness, training
from nrgan.checkpoint import load_checkpoint
from nrgan.error_handler import ConfigurationError, DivergenceError
from nrgan.noise_zoo import ImageBatch
from nrgan.settings import ExperimentConfig


def test_training_run_writes_its_artifacts(tiny_config):
    report = harness.run_experiment(tiny_config)
    paths = harness.RunPaths(Path(tiny_config.out_dir))

    assert json.loads(paths.config.read_text())["train"]["iterations"] == 2
    assert paths.manifest.exists()
    assert paths.generator_ckpt(1).exists() and paths.generator_ckpt().exists()
    assert (paths.grids / "clean_last.png").exists()
    assert (paths.grids / "noisy_0000001.png").exists()
    assert not paths.diverged.exists()
    assert "run finished" in paths.run_log.read_text(encoding="utf-8")

    lines = harness.MetricsLog(paths.metrics, fresh=False).read()
    steps = [r for r in lines if "iteration" in r and "loss_g" in r]
    assert [r["iteration"] for r in steps] == [1, 2]
    assert lines[0]["event"] == "start" and "note" in lines[0]

    assert report["fid_clean"] >= 0.0 and report["fid_noisy"] >= 0.0
    assert report["num_real"] == 8
    assert json.loads(paths.report.read_text())["iteration"] == 2


def _run_outputs(config):
    harness.run_experiment(config)
    paths = harness.RunPaths(Path(config.out_dir))
    records = [
        {k: v for k, v in r.items() if k != "wall_clock"}
        for r in harness.MetricsLog(paths.metrics, fresh=False).read()
    ]
    return {
        "manifest": paths.manifest.read_bytes(),
        "metrics": records,
        "report": paths.report.read_bytes(),
        "grid": (paths.grids / "clean_last.png").read_bytes(),
    }


def test_same_config_reproduces_the_run(tiny_config, tmp_path):
    train = replace(tiny_config.train, log_wall_clock=True)
    first = _run_outputs(replace(tiny_config, out_dir=str(tmp_path / "first"), train=train))
    second = _run_outputs(replace(tiny_config, out_dir=str(tmp_path / "second"), train=train))
    assert first == second
    assert len(first["metrics"]) == 4


def test_resumed_run_matches_an_uninterrupted_one(tiny_config, tmp_path):
    straight = replace(tiny_config, out_dir=str(tmp_path / "straight"))
    harness.run_experiment(straight)

    halfway = replace(tiny_config, out_dir=str(tmp_path / "resumed"), train=replace(tiny_config.train, iterations=1))
    harness.run_experiment(halfway)
    resumed = replace(halfway, train=tiny_config.train)
    last = harness.RunPaths(Path(resumed.out_dir)).generator_ckpt()
    report = harness.run_experiment(resumed, resume_from=last)

    assert report["iteration"] == 2
    a = load_checkpoint(harness.RunPaths(Path(straight.out_dir)).generator_ckpt())
    b = load_checkpoint(last)
    for key, value in a["state"].items():
        assert torch.equal(value, b["state"][key]), key
    assert torch.equal(a["rng_state"], b["rng_state"])
    events = [r.get("event") for r in harness.MetricsLog(Path(resumed.out_dir) / "metrics.jsonl", fresh=False).read()]
    assert events.count("start") == 1 and "resume" in events


def test_real_stats_cache_follows_the_sample_count_and_seed(tiny_config):
    harness.run_experiment(tiny_config)
    root = Path(tiny_config.out_dir)
    ckpt = harness.RunPaths(root).generator_ckpt()
    fewer = replace(tiny_config, eval=replace(tiny_config.eval, num_real=4))
    assert harness.evaluate_run(ckpt, fewer)["num_real"] == 4
    assert harness.evaluate_run(ckpt, tiny_config)["num_real"] == 8
    harness.evaluate_run(ckpt, replace(tiny_config, seed=tiny_config.seed + 1))
    assert len(list(root.glob("real_stats_*.npz"))) == 3
    assert harness.real_stats_key(tiny_config, 8) != harness.real_stats_key(fewer, 4)


def test_evaluate_and_grid_from_checkpoint(tiny_config, tmp_path):
    harness.run_experiment(tiny_config)
    ckpt = harness.RunPaths(Path(tiny_config.out_dir)).generator_ckpt()
    report = harness.evaluate_run(ckpt, tiny_config)
    assert report["iteration"] == 2
    png = harness.grid_from_checkpoint(ckpt, tiny_config, tmp_path / "grid.png")
    with Image.open(png) as im:
        assert im.size == (16, 16)


def test_divergence_leaves_a_marker(tiny_config, monkeypatch):
    def explode(self, real):
        raise DivergenceError("loss is not finite")

    monkeypatch.setattr(training.Trainer, "_update", explode)
    with pytest.raises(DivergenceError):
        harness.run_experiment(tiny_config)
    paths = harness.RunPaths(Path(tiny_config.out_dir))
    assert paths.diverged.exists()
    assert paths.generator_ckpt().exists()
    assert harness.MetricsLog(paths.metrics, fresh=False).read()[-1]["diverged"] is True


def test_oracle_bundle_cannot_be_trained(tiny_config):
    config = replace(tiny_config, model=replace(tiny_config.model, preset="oracle"))
    with pytest.raises(ConfigurationError):
        harness.run_experiment(config)


def test_denoiser_run_and_directory(tiny_config, tmp_path):
    report = harness.run_denoiser(tiny_config)
    assert report["scheme"] == "N2C"
    assert np.isfinite(report["psnr_denoised"]) and np.isfinite(report["psnr_noisy"])

    in_dir = tmp_path / "noisy"
    in_dir.mkdir()
    Image.fromarray(np.full((8, 8, 3), 128, dtype=np.uint8)).save(in_dir / "a.png")
    ckpt = Path(tiny_config.out_dir) / "ckpt" / "denoiser.pt"
    written = harness.denoise_directory(ckpt, in_dir, tmp_path / "clean")
    assert [p.name for p in written] == ["a.png"]


def test_gn2gc_with_the_oracle(tiny_config):
    config = replace(
        tiny_config,
        model=replace(tiny_config.model, variant="AmbientGAN", preset="oracle"),
        denoise=replace(tiny_config.denoise, scheme="GN2GC"),
    )
    report = harness.run_denoiser(config)
    assert report["scheme"] == "GN2GC"


def test_gn2gc_needs_a_generator(tiny_config):
    config = replace(tiny_config, denoise=replace(tiny_config.denoise, scheme="GN2GC"))
    with pytest.raises(ConfigurationError):
        harness.run_denoiser(config)


def test_grid_layout(tmp_path):
    images = ImageBatch(torch.linspace(-1, 1, 6).reshape(6, 1, 1, 1).expand(6, 8, 8, 3).contiguous())
    path = harness.emit_grid(images, 2, 3, tmp_path / "g.png")
    with Image.open(path) as im:
        assert im.size == (24, 16)
        pixels = np.asarray(im)
    assert pixels[0, 0, 0] == 0 and pixels[15, 23, 0] == 255


def test_unwritable_output_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ConfigurationError):
        harness.RunPaths(blocker / "run").prepare()


def test_atomic_json(tmp_path):
    harness.atomic_write_json(tmp_path / "r.json", {"a": 1})
    assert json.loads((tmp_path / "r.json").read_text()) == {"a": 1}
    assert list(tmp_path.iterdir()) == [tmp_path / "r.json"]


@pytest.mark.slow
def test_toy_si1_learns_the_noise_amplitude(tmp_path):
    config = ExperimentConfig.from_dict(
        {
            "train": {"iterations": 20000, "log_every": 1000, "checkpoint_every": 5000, "grid_every": 5000},
            "eval": {"num_real": 2000, "num_fake": 2000},
            "out_dir": str(tmp_path / "si1"),
        }
    )
    harness.run_experiment(config)
    bundle, _ = harness.load_bundle(harness.RunPaths(Path(config.out_dir)).generator_ckpt())
    with torch.no_grad():
        z = torch.randn(512, bundle.z_dim)
        sigma_map = bundle.ema_g_n(z)
    expected = 2 * 25 / 255
    assert abs(float(sigma_map.mean()) - expected) <= 0.2 * expected


@pytest.mark.slow
def test_toy_poisson_run_with_blurvh(tmp_path):
    from nrgan.settings import load_preset

    raw = load_preset("toy_poisson")
    raw["out_dir"] = str(tmp_path / "poisson")
    report = harness.run_experiment(ExperimentConfig.from_dict(raw))
    assert not (tmp_path / "poisson" / "DIVERGED").exists()
    assert report["fid_clean"] >= 0.0


def _toy_run(tmp_path, variant, seed, sigma=25.0):
    config = ExperimentConfig.from_dict(
        {
            "noise": {"variant": "A", "sigma": sigma},
            "model": {"variant": variant},
            "train": {"iterations": 20000, "log_every": 1000, "checkpoint_every": 20000, "grid_every": 20000},
            "out_dir": str(tmp_path / f"{variant}_{seed}_{sigma:g}"),
            "seed": seed,
        }
    )
    report = harness.run_experiment(config)
    return config, report


@pytest.mark.slow
def test_noise_robust_variants_beat_the_plain_gan(tmp_path):
    wins = 0
    for seed in range(3):
        gan = _toy_run(tmp_path, "GAN", seed)[1]["fid_clean"]
        si1 = _toy_run(tmp_path, "SI1", seed)[1]["fid_clean"]
        si2 = _toy_run(tmp_path, "SI2", seed)[1]["fid_clean"]
        wins += si1 <= 0.7 * gan and si2 <= 0.7 * gan
    assert wins >= 2


@pytest.mark.slow
def test_clean_data_learns_no_noise(tmp_path):
    config, si1 = _toy_run(tmp_path, "SI1", 0, sigma=0.0)
    _, gan = _toy_run(tmp_path, "GAN", 0, sigma=0.0)
    bundle, _ = harness.load_bundle(harness.RunPaths(Path(config.out_dir)).generator_ckpt())
    with torch.no_grad():
        sigma_map = bundle.ema_g_n(torch.randn(512, bundle.z_dim))
    # dynamic range of symmetric_unit images is 2
    assert float(sigma_map.mean()) < 0.05 * 2.0
    assert abs(si1["fid_clean"] - gan["fid_clean"]) <= 0.15 * gan["fid_clean"]


@pytest.mark.slow
def test_denoising_schemes_rank_as_expected(tmp_path):
    from nrgan.settings import load_preset

    psnr = {}
    for scheme in ("N2C", "N2N", "GN2GC"):
        raw = load_preset("toy_denoise")
        raw["denoise"]["scheme"] = scheme
        raw["out_dir"] = str(tmp_path / scheme)
        report = harness.run_denoiser(ExperimentConfig.from_dict(raw))
        psnr[scheme] = report["psnr_denoised"]
        noisy = report["psnr_noisy"]

    # every scheme sees the same test split and noise seeds; 0.5 dB tolerance
    assert psnr["N2C"] >= psnr["N2N"] - 0.5
    assert psnr["N2N"] >= psnr["GN2GC"] - 0.5
    assert psnr["GN2GC"] >= noisy + 1.0
