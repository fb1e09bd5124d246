import csv
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from molm import engine as E
from molm.keycodec import sample_key
from molm.training import (FeatureSpec, PerceptualFeatures, TrainConfig, Trainer, TrainingError, loss_imp, loss_ver,
                           train, train_config_from_dict)

from conftest import randomize_bank

QUICK = TrainConfig(steps=4, batch_size=2, lam_delay=0, lam_warmup=0)


# ---------------------------------------------------------------------------
# losses


def test_loss_imp_zero_on_identical():
    x = torch.rand(2, 3, 16, 16)
    assert float(loss_imp(x, x.clone(), PerceptualFeatures())) == 0.0


def test_loss_imp_identity_feature_convention():
    gen = torch.Generator().manual_seed(0)
    a, b = torch.rand(3, 3, 8, 8, generator=gen), torch.rand(3, 3, 8, 8, generator=gen)
    got = float(loss_imp(a, b, [(1.0, lambda x: x)]))
    assert got == pytest.approx(3 * 8 * 8 * float(((a - b) ** 2).mean()), rel=1e-6)


def _np_conv3x3(x, w):
    c_out = w.shape[0]
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((c_out, x.shape[1], x.shape[2]))
    for o in range(c_out):
        for i in range(x.shape[1]):
            for j in range(x.shape[2]):
                out[o, i, j] = (pad[:, i:i + 3, j:j + 3] * w[o]).sum()
    return out


def _np_features(img, net):
    s = net.scale
    c, h, w = img.shape
    x = img.reshape(c, h // s, s, w // s, s).mean(axis=(2, 4))
    hdn = _np_conv3x3(x, net.w1.detach().double().numpy())
    hdn = np.where(hdn > 0, hdn, 0.2 * hdn)
    f = _np_conv3x3(hdn, net.w2.detach().double().numpy())
    return f / math.sqrt(f.shape[1] * f.shape[2])


def test_loss_imp_matches_numpy_recompute():
    feats = PerceptualFeatures(FeatureSpec(channels=4))
    rng = np.random.default_rng(1)
    a, b = rng.random((2, 3, 8, 8)), rng.random((2, 3, 8, 8))
    expect = 0.0
    for w, net in zip(feats.spec.weights, feats.nets):
        for n in range(2):
            expect += w * ((_np_features(a[n], net) - _np_features(b[n], net)) ** 2).sum() / 2
    got = float(loss_imp(torch.from_numpy(a).float(), torch.from_numpy(b).float(), feats))
    assert got == pytest.approx(expect, rel=1e-5)


def test_feature_defaults():
    spec = FeatureSpec()
    assert spec.scales == (1, 2, 4) and spec.channels == 16
    assert sum(spec.weights) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        PerceptualFeatures(FeatureSpec(weights=(1.0,)))
    with pytest.raises(E.ShapeError):
        loss_imp(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 4, 4), PerceptualFeatures())


def test_loss_ver_values():
    z = torch.zeros(1, 16)
    assert float(loss_ver(z, torch.ones(16))) == pytest.approx(math.log(2), abs=1e-7)
    u = torch.full((1, 16), 20.0, dtype=torch.float64)
    assert float(loss_ver(u, torch.ones(16, dtype=torch.float64))) == pytest.approx(2.06e-9, rel=1e-2)
    assert float(loss_ver(u, torch.zeros(16, dtype=torch.float64))) == pytest.approx(20.0, rel=1e-9)
    big = torch.full((2, 4), 1e4)
    assert math.isfinite(float(loss_ver(big, torch.zeros(4))))
    with pytest.raises(E.ShapeError):
        loss_ver(torch.zeros(2, 4), torch.zeros(2, 5))


# ---------------------------------------------------------------------------
# schedule and config


def test_lam_schedule(tiny_system):
    tr = Trainer(tiny_system, TrainConfig(lam=2.0, lam_delay=10, lam_warmup=20))
    assert [tr.lam_at(s) for s in (0, 9, 10, 20, 30, 100)] == [0.0, 0.0, 0.0, 1.0, 2.0, 2.0]
    tr = Trainer(tiny_system, TrainConfig(lam=3.0, lam_delay=0, lam_warmup=0))
    assert tr.lam_at(0) == 3.0


@pytest.mark.parametrize("bad", [dict(lam=-1.0), dict(lam_warmup=-1), dict(steps=-1), dict(batch_size=0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad).validate()


def test_train_config_dict_roundtrip():
    cfg = TrainConfig(class_subset=(0, 2), lam=0.5)
    assert train_config_from_dict(cfg.as_dict()) == cfg


# ---------------------------------------------------------------------------
# training steps


def test_l_imp_zero_at_init(tiny_system):
    tr = Trainer(tiny_system, QUICK)
    assert tr.train_step().l_imp == 0.0


def test_l_imp_uses_unaugmented_render(tiny_system):
    randomize_bank(tiny_system.bank, seed=3)
    tr = Trainer(tiny_system, QUICK)
    rng = tr.rng_for(0)
    key = sample_key(tiny_system.M, rng)
    q, t = tr._sample_batch(rng)
    with torch.no_grad():
        clean = tiny_system.generator(q, t)
        marked = tiny_system.generator(q, t, bank=tiny_system.bank, path=tiny_system.bank.route(key))
        expect = float(loss_imp(marked, clean, tr.features))
    assert expect > 0
    assert tr.train_step().l_imp == pytest.approx(expect, rel=1e-6)


def test_gradient_flow(tiny_system):
    tr = Trainer(tiny_system, QUICK)
    gen_sum = E.checksum(tiny_system.generator)
    bank = tiny_system.bank
    path = bank.route(sample_key(tiny_system.M, tr.rng_for(0)))
    before = [[m.A.detach().clone() for m in row] for row in bank.markers]
    ext_before = E.checksum(tiny_system.extractor)
    tr.train_step()
    assert E.checksum(tiny_system.generator) == gen_sum
    assert E.checksum(tiny_system.extractor) != ext_before
    for l, row in enumerate(bank.markers):
        for p, m in enumerate(row):
            if p == path.indices[l]:
                assert float(m.B.detach().abs().sum()) > 0
            else:
                assert torch.equal(m.A.detach(), before[l][p])
                assert float(m.B.detach().abs().sum()) == 0.0


def test_zero_steps_leaves_system_unchanged(tiny_system, tmp_path):
    before = E.checksum(tiny_system.bank), E.checksum(tiny_system.extractor)
    trainer, records = train(tiny_system, replace(QUICK, steps=0), out_path=tmp_path / "z.ckpt")
    assert records == [] and trainer.step == 0
    assert (E.checksum(tiny_system.bank), E.checksum(tiny_system.extractor)) == before


def test_resume_is_bit_identical(tiny_system, tmp_path):
    from molm.system import build_system
    from conftest import TINY_BACKBONE, TINY_MARKERS
    from molm.extractor import ExtractorConfig

    def fresh():
        ext = ExtractorConfig(key_bits=TINY_MARKERS.key_bits(TINY_BACKBONE), image_size=8, widths=(8, 8, 8, 8))
        return build_system(TINY_BACKBONE, TINY_MARKERS, ext, 0, 1, 2)

    cfg = replace(QUICK, steps=6)
    full, _ = train(fresh(), cfg)
    half, _ = train(fresh(), replace(cfg, steps=3), out_path=tmp_path / "h.ckpt")
    resumed = Trainer.resume(tmp_path / "h.ckpt", cfg)
    assert resumed.step == 3
    train(resumed.system, cfg, trainer=resumed)
    assert E.checksum(resumed.system.bank) == E.checksum(full.system.bank)
    assert E.checksum(resumed.system.extractor) == E.checksum(full.system.extractor)


def test_records_csv(tiny_system, tmp_path):
    out = tmp_path / "rec.csv"
    train(tiny_system, replace(QUICK, steps=5, checkpoint_every=2), out_path=tmp_path / "c.ckpt", records_csv=out)
    rows = list(csv.DictReader(out.open()))
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3, 4]
    assert set(rows[0]) == {"step", "l_imp", "l_ver", "bit_acc", "psnr", "seconds"}


def test_non_finite_loss_raises(tiny_system):
    with torch.no_grad():
        tiny_system.extractor.parameters().__next__().fill_(float("nan"))
    with pytest.raises((TrainingError, E.NonFiniteError)):
        Trainer(tiny_system, QUICK).train_step()


def test_class_subset_respected(tiny_system):
    tr = Trainer(tiny_system, replace(QUICK, class_subset=(1, 3), batch_size=16))
    _, t = tr._sample_batch(tr.rng_for(0))
    assert set(t.tolist()) <= {1, 3}


# ---------------------------------------------------------------------------
# default-size behaviour (about 25 s each on one core)


@pytest.mark.slow
def test_verification_only_run_halves_l_ver(default_system):
    cfg = TrainConfig(lam=0.0, lam_delay=0, lam_warmup=0, steps=300)
    _, recs = train(default_system, cfg)
    first = np.mean([r.l_ver for r in recs[:20]])
    last = np.mean([r.l_ver for r in recs[-20:]])
    assert last <= 0.5 * first, f"L_ver {first:.3f} -> {last:.3f} after 300 steps"


@pytest.mark.slow
def test_huge_lambda_suppresses_marker(default_system):
    cfg = TrainConfig(lam=1e4, lam_delay=0, lam_warmup=0, steps=300)
    trainer, recs = train(default_system, cfg)
    rng = np.random.default_rng(99)
    key = sample_key(default_system.M, rng)
    q, t = trainer._sample_batch(rng)
    with torch.no_grad():
        clean = default_system.generator(q, t)
        marked = default_system.generator(q, t, bank=default_system.bank, path=default_system.bank.route(key))
    assert float((marked - clean).abs().mean()) < 1e-3
    assert np.mean([r.l_ver for r in recs[-20:]]) > 0.5 * math.log(2)
