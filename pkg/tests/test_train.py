import csv

import numpy as np
import pytest

from m2msplat.mrn import MrnConfig
from m2msplat.scenes import SyntheticScene
from m2msplat.tensor import GradTape, Tensor, grad_check
from m2msplat.train import (AdamState, TrainConfig, adam_step, augment, census_loss, charbonnier_loss,
                            clip_grad_norm, cosine_lr, flip_triplet, held_out_suite, reverse_triplet,
                            sample_batch, total_loss, train_toy, write_loss_csv)


# ------------------------------------------------------------------ losses


def test_charbonnier_examples():
    a = np.zeros((3, 4, 4))
    assert charbonnier_loss(a, a).item() == pytest.approx(1e-3)
    assert charbonnier_loss(a, a + 0.5).item() == pytest.approx(np.sqrt(0.25 + 1e-6))
    with pytest.raises(ValueError):
        charbonnier_loss(a, a[:, :2])


def _census_oracle(pred, gt, sigma=0.1, eps=0.1):
    g = np.array([0.299, 0.587, 0.114])
    yp, yg = np.tensordot(g, pred, 1), np.tensordot(g, gt, 1)
    h, w = yp.shape
    total, count = 0.0, 0
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            acc = 0.0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dy == 0 and dx == 0:
                        continue
                    dp = yp[y + dy, x + dx] - yp[y, x]
                    dg = yg[y + dy, x + dx] - yg[y, x]
                    cp = dp / np.sqrt(dp * dp + sigma * sigma)
                    cg = dg / np.sqrt(dg * dg + sigma * sigma)
                    d2 = (cp - cg) ** 2
                    acc += d2 / (d2 + eps)
            total += acc / 8
            count += 1
    return total / count


def test_census_matches_brute_force():
    rng = np.random.default_rng(0)
    pred, gt = rng.uniform(size=(3, 7, 9)), rng.uniform(size=(3, 7, 9))
    assert census_loss(pred, gt).item() == pytest.approx(_census_oracle(pred, gt), rel=1e-12)
    assert census_loss(gt, gt).item() == 0.0
    # a global brightness offset leaves the census transform unchanged
    assert census_loss(gt + 0.1, gt).item() < 1e-20


def test_census_rejects_bad_inputs():
    with pytest.raises(ValueError):
        census_loss(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))
    with pytest.raises(ValueError):
        census_loss(np.zeros((3, 2, 8)), np.zeros((3, 2, 8)))


def test_loss_gradients():
    rng = np.random.default_rng(1)
    gt = rng.uniform(size=(3, 6, 6))
    x = Tensor(rng.uniform(size=(3, 6, 6)), requires_grad=True)
    assert grad_check(lambda p: total_loss(p, gt)[0], [x], eps=1e-6) < 1e-4


# ---------------------------------------------------------------- optimizer


def test_adam_first_step_is_signed_lr():
    p = {"w": Tensor(np.array([1.0, -2.0, 0.5]))}
    g = {"w": np.array([0.3, -4.0, 1e-3])}
    assert adam_step(p, g, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"].data, [0.99, -1.99, 0.49], rtol=1e-6)


def test_adam_decoupled_weight_decay_and_missing_grad():
    p = {"w": Tensor(np.array([2.0])), "v": Tensor(np.array([3.0]))}
    adam_step(p, {"w": np.array([0.0])}, AdamState(), lr=0.1, weight_decay=0.5)
    # zero gradient: only the decay term moves the weight
    np.testing.assert_allclose(p["w"].data, [2.0 - 0.1 * 0.5 * 2.0])
    np.testing.assert_allclose(p["v"].data, [3.0 - 0.1 * 0.5 * 3.0])


def test_adam_skips_non_finite():
    p = {"w": Tensor(np.array([1.0]))}
    st = AdamState()
    assert not adam_step(p, {"w": np.array([np.nan])}, st, lr=0.1)
    assert p["w"].data.tolist() == [1.0] and st.step == 0 and st.skipped == [1]
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(2)}, st, lr=0.1)


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0]), "c": None}
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8])
    g = {"a": np.array([0.3])}
    clip_grad_norm(g, 1.0)
    assert g["a"][0] == 0.3


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1.0) == 1.0
    assert cosine_lr(50, 100, 1.0) == pytest.approx(0.5)
    assert cosine_lr(100, 100, 1.0, 0.1) == pytest.approx(0.1)


# --------------------------------------------------------------------- data


def test_config_from_dict_and_validation():
    cfg = TrainConfig.from_dict({"iterations": "10", "lr": "0.01", "kinds": "zoom, static",
                                 "flip_spatial": "false"})
    assert cfg.iterations == 10 and cfg.lr == 0.01 and cfg.kinds == ("zoom", "static")
    assert cfg.flip_spatial is False
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ValueError):
        TrainConfig(flow_source="oracle")
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)


def test_flip_is_involution_and_flips_flow_sign():
    tri = SyntheticScene("translation", fixed={"shift": (2.0, -1.0)}).sample(np.random.default_rng(2), 16)
    both = flip_triplet(tri, True, True)
    np.testing.assert_allclose(both.F01[:, 0, 0], [-2.0, 1.0])
    np.testing.assert_array_equal(both.I0, tri.I0[:, ::-1, ::-1])
    back = flip_triplet(both, True, True)
    for a, b in zip((tri.I0, tri.It, tri.I1, tri.F01, tri.F10), (back.I0, back.It, back.I1, back.F01, back.F10)):
        assert a.tobytes() == b.tobytes()


def test_reverse_triplet():
    tri = SyntheticScene("zoom").sample(np.random.default_rng(3), 16, t=0.25)
    rev = reverse_triplet(tri)
    assert rev.t == 0.75 and rev.I0 is tri.I1 and rev.F01 is tri.F10


def test_augment_keeps_range():
    cfg = TrainConfig()
    rng = np.random.default_rng(4)
    for _ in range(5):
        tri = augment(SyntheticScene("translation").sample(rng, 16), rng, cfg)
        assert tri.I0.min() >= 0 and tri.I0.max() <= 1 and tri.t == 0.5


def test_sample_batch_shapes():
    cfg = TrainConfig(batch=3, crop=32)
    I0, I1, It, f01, f10, t = sample_batch(np.random.default_rng(5), cfg, MrnConfig.toy())
    assert I0.shape == (3, 3, 32, 32) and f01.shape == (3, 2, 8, 8) and t == 0.5


def test_held_out_suite_is_fixed():
    cfg = TrainConfig(held_out=4)
    a, b = held_out_suite(cfg), held_out_suite(cfg)
    assert len(a) == 4 and all(x.I0.tobytes() == y.I0.tobytes() for x, y in zip(a, b))


# ------------------------------------------------------------------ training


def test_short_training_is_deterministic(tmp_path):
    cfg = TrainConfig(iterations=3, batch=2, held_out=2, log_every=0)
    r1 = train_toy(cfg, out=tmp_path / "a.m2mw", loss_csv=tmp_path / "a.csv")
    r2 = train_toy(cfg, out=tmp_path / "b.m2mw")
    assert (tmp_path / "a.m2mw").read_bytes() == (tmp_path / "b.m2mw").read_bytes()
    assert r1.losses == r2.losses and len(r1.losses) == 3
    assert set(r1.final_eval) == {"loss", "charbonnier", "census", "psnr"}
    rows = list(csv.reader(open(tmp_path / "a.csv")))
    assert rows[0] == ["iteration", "L_char", "L_cen", "total"] and len(rows) == 4
    assert float(rows[1][3]) == r1.losses[0][3]


def test_training_updates_parameters():
    cfg = TrainConfig(iterations=2, batch=1, held_out=1, log_every=0)
    res = train_toy(cfg)
    head = res.net.parameters()
    assert any(np.any(p.data) for k, p in head.items() if k.startswith("head"))


def test_loss_csv_format(tmp_path):
    write_loss_csv(tmp_path / "l.csv", [(0, 0.5, 0.25, 0.75)])
    assert (tmp_path / "l.csv").read_text().splitlines() == ["iteration,L_char,L_cen,total", "0,0.5,0.25,0.75"]


def test_tape_through_total_loss():
    x = Tensor(np.full((3, 4, 4), 0.2), requires_grad=True)
    with GradTape() as tape:
        tot, _, _ = total_loss(x, np.zeros((3, 4, 4)))
    tape.backward(tot)
    assert x.grad.shape == (3, 4, 4) and np.all(x.grad > 0)
