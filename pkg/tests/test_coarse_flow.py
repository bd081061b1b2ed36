import numpy as np
import pytest

from m2msplat.coarse_flow import CoarseFlowConfig, _candidates, estimate_coarse_flow, fit_config
from m2msplat.scenes import SyntheticScene


def _shifted(shift, size=128, seed=0):
    scene = SyntheticScene("translation", textures=("noise",), fixed={"shift": shift})
    return scene.sample(np.random.default_rng(seed), size)


def test_config_validation():
    for bad in (dict(block=3), dict(radius=0), dict(levels=0), dict(downscale=0)):
        with pytest.raises(ValueError):
            CoarseFlowConfig(**bad)
    assert CoarseFlowConfig().max_displacement == 4 * 7


def test_candidate_order_breaks_ties_toward_zero():
    cands = _candidates(2)
    assert cands[0] == (0, 0)
    assert cands[1:5] == [(-1, 0), (0, -1), (0, 1), (1, 0)]
    mags = [u * u + v * v for u, v in cands]
    assert mags == sorted(mags)


def test_identical_frames_zero_flow():
    tri = _shifted((0.0, 0.0), 128)
    f01, f10 = estimate_coarse_flow(tri.I0, tri.I0)
    assert f01.shape == (2, 32, 32)
    assert not np.any(f01) and not np.any(f10)


def test_uniform_frames_zero_flow():
    img = np.full((3, 128, 128), 0.4, np.float32)
    f01, f10 = estimate_coarse_flow(img, img * 0.5)
    assert not np.any(f01) and not np.any(f10)


def test_translation_oracle_coarse_units():
    # (6, 0) coarse pixels at R=4 is a 24 px shift at full resolution
    tri = _shifted((24.0, 0.0), 128)
    f01, f10 = estimate_coarse_flow(tri.I0, tri.I1)
    inner = (slice(None), slice(4, -4), slice(8, -8))
    err01 = np.abs(f01[inner] - np.array([6.0, 0.0])[:, None, None]).mean()
    err10 = np.abs(f10[inner] - np.array([-6.0, 0.0])[:, None, None]).mean()
    assert err01 < 1.0 and err10 < 1.0


def test_full_resolution_translation():
    tri = _shifted((6.0, -3.0), 64, seed=1)
    cfg = CoarseFlowConfig(levels=2, downscale=1)
    f01, _ = estimate_coarse_flow(tri.I0, tri.I1, cfg)
    inner = f01[:, 12:-12, 12:-12]
    assert np.abs(inner - np.array([6.0, -3.0])[:, None, None]).mean() < 0.25


def test_magnitude_bound_and_determinism():
    rng = np.random.default_rng(2)
    cfg = CoarseFlowConfig(levels=2, downscale=2)
    for _ in range(3):
        a = rng.uniform(size=(3, 64, 64)).astype(np.float32)
        b = rng.uniform(size=(3, 64, 64)).astype(np.float32)
        f01, f10 = estimate_coarse_flow(a, b, cfg)
        assert np.abs(f01).max() <= cfg.max_displacement
        assert np.abs(f10).max() <= cfg.max_displacement
        again, _ = estimate_coarse_flow(a.copy(), b.copy(), cfg)
        assert again.tobytes() == f01.tobytes()


def test_rejects_small_or_mismatched_images():
    with pytest.raises(ValueError):
        estimate_coarse_flow(np.zeros((3, 64, 64)), np.zeros((3, 64, 64)))
    with pytest.raises(ValueError):
        estimate_coarse_flow(np.zeros((3, 128, 128)), np.zeros((3, 128, 64)))


def test_fit_config_shrinks_pyramid():
    cfg = CoarseFlowConfig()
    assert fit_config(cfg, (256, 256)).levels == 3
    small = fit_config(cfg, (32, 32))
    assert small.levels == 1 and small.block == 8
    tiny = fit_config(cfg, (16, 24))
    assert tiny.block == 4
    with pytest.raises(ValueError):
        fit_config(cfg, (12, 12))
