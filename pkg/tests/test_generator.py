import numpy as np
import pytest
import torch

from molm import engine as E
from molm.generator import (BackboneConfig, ConfigError, GeneratorModel, MarkerBank, MarkerConfig, build_backbone,
                            build_bank, forward_clean, forward_marked, sample_inputs)
from molm.keycodec import RoutingPath, WatermarkKey, sample_key

from conftest import TINY_BACKBONE, TINY_MARKERS, randomize_bank


def _inputs(cfg, n=3, seed=0):
    return sample_inputs(cfg, n, np.random.default_rng(seed))


def test_same_seed_same_weights():
    assert E.checksum(build_backbone(seed=3)) == E.checksum(build_backbone(seed=3))
    assert E.checksum(build_backbone(seed=3)) != E.checksum(build_backbone(seed=4))


def test_default_output_shape_and_range():
    model = build_backbone()
    q, t = _inputs(model.config, 4)
    x = forward_clean(model, q, t)
    assert x.shape == (4, 3, 32, 32)
    assert model.config.num_blocks == 8
    assert float(x.min()) >= 0.0 and float(x.max()) <= 1.0


def test_different_latents_differ():
    model = build_backbone()
    q, t = _inputs(model.config, 2)
    t = torch.tensor([0, 0])
    x = forward_clean(model, q, t)
    assert float((x[0] - x[1]).abs().mean()) > 0


def test_backbone_is_frozen():
    assert not any(p.requires_grad for p in build_backbone(TINY_BACKBONE).parameters())


def test_alpha_zero_is_clean():
    model = build_backbone(TINY_BACKBONE)
    bank = build_bank(TINY_BACKBONE, MarkerConfig(paths=4, rank=2, alpha=0.0), 1)
    randomize_bank(bank)
    q, t = _inputs(TINY_BACKBONE)
    key = sample_key(bank.M, 0)
    assert torch.equal(forward_marked(model, bank, key, q, t), forward_clean(model, q, t))


def test_zero_B_is_clean():
    model = build_backbone(TINY_BACKBONE)
    bank = build_bank(TINY_BACKBONE, TINY_MARKERS, 1)
    q, t = _inputs(TINY_BACKBONE)
    for seed in range(5):
        key = sample_key(bank.M, seed)
        assert torch.equal(forward_marked(model, bank, key, q, t), forward_clean(model, q, t))
    zero = RoutingPath((0,) * bank.L, bank.P)
    assert torch.equal(forward_marked(model, bank, zero, q, t), forward_clean(model, q, t))


def test_marked_deterministic_and_key_dependent():
    model = build_backbone(TINY_BACKBONE)
    bank = build_bank(TINY_BACKBONE, TINY_MARKERS, 1)
    randomize_bank(bank)
    q, t = _inputs(TINY_BACKBONE)
    a = forward_marked(model, bank, sample_key(bank.M, 0), q, t)
    assert torch.equal(a, forward_marked(model, bank, sample_key(bank.M, 0), q, t))
    b = forward_marked(model, bank, WatermarkKey(tuple(1 - v for v in sample_key(bank.M, 0).bits)), q, t)
    assert float((a - b).detach().abs().mean()) > 0


def test_path_bank_mismatch():
    model = build_backbone(TINY_BACKBONE)
    bank = build_bank(TINY_BACKBONE, TINY_MARKERS, 1)
    q, t = _inputs(TINY_BACKBONE)
    with pytest.raises(ValueError):
        model(q, t, bank=bank, path=RoutingPath((0,) * (bank.L + 1), bank.P))
    with pytest.raises(ValueError):
        model(q, t, bank=bank, path=None)


def test_input_validation():
    model = build_backbone(TINY_BACKBONE)
    with pytest.raises(E.ShapeError):
        model(torch.zeros(2, 5), torch.zeros(2))
    with pytest.raises(ValueError):
        model(torch.zeros(1, TINY_BACKBONE.latent_dim), torch.tensor([TINY_BACKBONE.num_classes]))


def test_locality():
    model = build_backbone(TINY_BACKBONE)
    bank = build_bank(TINY_BACKBONE, TINY_MARKERS, 1)
    randomize_bank(bank)
    q, t = _inputs(TINY_BACKBONE, 2)
    rng = np.random.default_rng(0)
    paths = [RoutingPath(tuple(rng.integers(0, bank.P, bank.L)), bank.P) for _ in range(24)]
    before = [model(q, t, bank=bank, path=p) for p in paths]
    ell, p = 1, 2
    with torch.no_grad():
        bank.markers[ell][p].B.add_(0.5)
        bank.markers[ell][p].A.mul_(-2.0)
    for path, old in zip(paths, before):
        new = model(q, t, bank=bank, path=path)
        if path.indices[ell] == p:
            assert not torch.equal(new, old)
        else:
            assert torch.equal(new, old)


def test_capacity_variants():
    b14 = BackboneConfig(num_blocks=14)
    assert MarkerConfig().key_bits(b14) == 28
    assert MarkerConfig().key_bits(BackboneConfig()) == 16
    assert MarkerConfig(per_conv=True).key_bits(BackboneConfig()) == 32
    assert MarkerConfig(paths=8).key_bits(BackboneConfig()) == 24
    assert MarkerConfig(routed_blocks=(0, 3)).key_bits(BackboneConfig()) == 4


def test_per_conv_markers_run():
    cfg = MarkerConfig(paths=2, rank=2, per_conv=True)
    model = build_backbone(TINY_BACKBONE)
    bank = build_bank(TINY_BACKBONE, cfg, 1)
    randomize_bank(bank)
    q, t = _inputs(TINY_BACKBONE)
    x = forward_marked(model, bank, sample_key(bank.M, 0), q, t)
    assert x.shape == (3, 3, 8, 8)
    assert not torch.equal(x, forward_clean(model, q, t))


@pytest.mark.parametrize("kwargs", [
    dict(image_size=30), dict(image_size=24, base_size=4), dict(num_blocks=2), dict(channels=0),
])
def test_invalid_backbone(kwargs):
    with pytest.raises(ConfigError):
        GeneratorModel(BackboneConfig(**kwargs), 0)


def test_invalid_markers():
    with pytest.raises(ConfigError):
        MarkerBank(BackboneConfig(), MarkerConfig(routed_blocks=(0, 0)), 0)
    with pytest.raises(ConfigError):
        MarkerBank(BackboneConfig(), MarkerConfig(rank=64), 0)


def test_marker_init():
    bank = build_bank(BackboneConfig(), MarkerConfig(), 0)
    assert len(bank.markers) == 8 and all(len(row) == 4 for row in bank.markers)
    A = torch.cat([m.A.detach().reshape(-1) for row in bank.markers for m in row])
    assert abs(float(A.std()) - 0.02) < 0.002
    assert all(float(m.B.detach().abs().max()) == 0.0 for row in bank.markers for m in row)


def test_every_resolution_is_reached():
    for cfg in (TINY_BACKBONE, BackboneConfig(num_blocks=3), BackboneConfig(image_size=4, base_size=2, num_blocks=1)):
        q, t = _inputs(cfg, 1)
        assert GeneratorModel(cfg, 0)(q, t).shape[-1] == cfg.image_size


# -- dense oracle -------------------------------------------------------------

def _conv3(x, w, b):
    """x: (C, H, W), w: (O, C, 3, 3); zero padding 1, explicit loops."""
    C, Hh, W = x.shape
    xp = np.zeros((C, Hh + 2, W + 2))
    xp[:, 1:-1, 1:-1] = x
    out = np.zeros((w.shape[0], Hh, W))
    for o in range(w.shape[0]):
        for i in range(Hh):
            for j in range(W):
                out[o, i, j] = b[o] + sum(xp[c, i + di, j + dj] * w[o, c, di, dj]
                                          for c in range(C) for di in range(3) for dj in range(3))
    return out


def test_dense_oracle_single_block():
    cfg = BackboneConfig(image_size=2, base_size=2, num_blocks=1, channels=1, latent_dim=2, num_classes=2)
    mcfg = MarkerConfig(paths=2, rank=1, alpha=0.7)
    model = GeneratorModel(cfg, 5)
    bank = MarkerBank(cfg, mcfg, 6)
    with torch.no_grad():
        bank.markers[0][1].B.fill_(0.8)
        bank.markers[0][1].A.fill_(-1.3)
    q = torch.tensor([[0.4, -1.1]])
    t = torch.tensor([1])
    got = model(q, t, bank=bank, path=RoutingPath((1,), 2)).detach().double().numpy()[0]

    P = {k: v.double().numpy() for k, v in model.state_dict().items()}
    z = np.concatenate([q.double().numpy()[0], P["embedding"][1]])
    h = np.zeros(4)
    for j in range(4):
        h[j] = P["b_in"][j] + sum(z[i] * P["w_in"][i, j] for i in range(4))
    h = h.reshape(1, 2, 2) + P["texture.patterns.0"]
    y = _conv3(h, P["blocks.0.w1"], P["blocks.0.b1"])
    a = np.where(y > 0, y, 0.2 * y)
    y = _conv3(a, P["blocks.0.w2"], P["blocks.0.b2"])
    out = h + y + 0.7 * 0.8 * (-1.3) * h
    pre = _conv3(out, P["w_out"], P["b_out"])
    expect = 1 / (1 + np.exp(-pre))
    assert np.max(np.abs(got - expect) / np.abs(expect)) < 1e-5


def test_alpha_first_order_linearity():
    """One AdamW step from B = 0 moves B by ~lr * sign(grad) whatever alpha
    is, so the image perturbation is proportional to alpha."""
    q, t = _inputs(TINY_BACKBONE, 2)
    model = build_backbone(TINY_BACKBONE)
    key = sample_key(TINY_MARKERS.key_bits(TINY_BACKBONE), 0)
    sizes = {}
    for alpha in (0.5, 1.0, 2.0):
        bank = build_bank(TINY_BACKBONE, MarkerConfig(paths=4, rank=2, alpha=alpha), 1)
        path = bank.route(key)
        params = list(bank.parameters())
        loss = forward_marked(model, bank, path, q, t).mean()
        opt = E.make_optimizer(params, E.OptimConfig(weight_decay=0.0))
        E.optimizer_step(opt, params, E.backward(loss, params))
        with torch.no_grad():
            sizes[alpha] = float((forward_marked(model, bank, path, q, t) - forward_clean(model, q, t)).abs().mean())
    assert sizes[1.0] > 0
    assert abs(sizes[0.5] / sizes[1.0] - 0.5) < 0.02
    assert abs(sizes[2.0] / sizes[1.0] - 2.0) < 0.04


def test_texture_shift_variant():
    cfg = BackboneConfig(image_size=8, num_blocks=3, channels=4, latent_dim=4, num_classes=2, base_size=2,
                         texture_shift=True)
    model = GeneratorModel(cfg, 0)
    q, t = _inputs(cfg, 3)
    off = model.texture.offsets(q)
    assert off.shape == (3, 2) and float(off.min()) >= 0 and float(off.max()) < 1
    assert model(q, t).shape == (3, 3, 8, 8)


def test_no_texture():
    cfg = BackboneConfig(image_size=8, num_blocks=3, channels=4, latent_dim=4, num_classes=2, base_size=2,
                         texture_gain=0.0)
    model = GeneratorModel(cfg, 0)
    assert model.texture is None
    q, t = _inputs(cfg, 1)
    assert model(q, t).shape == (1, 3, 8, 8)
