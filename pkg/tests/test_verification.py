import itertools
import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from scipy.special import betainc
from scipy.stats import binom

from molm.extractor import Extractor, ExtractorConfig
from molm.keycodec import WatermarkKey, hamming, sample_key
from molm.verification import (DetectionReport, KeyDatabase, VerificationError, attribute, betainc_regularized,
                               binomial_band, bit_accuracy, detect, detect_batch, fpr, fpr_exact, nearest_owner,
                               threshold_for_fpr)


def test_bit_accuracy_examples():
    k = sample_key(28, 0)
    assert bit_accuracy(k, k) == 1.0
    assert bit_accuracy(k, WatermarkKey(tuple(1 - b for b in k.bits))) == 0.0
    flipped = list(k.bits)
    for j in range(7):
        flipped[j] ^= 1
    assert bit_accuracy(k, WatermarkKey(tuple(flipped))) == 0.75
    with pytest.raises(VerificationError):
        bit_accuracy(k, sample_key(16, 0))


@given(st.lists(st.integers(0, 1), min_size=1, max_size=64), st.randoms())
def test_bit_accuracy_is_one_minus_normalised_hamming(bits, rnd):
    a = WatermarkKey(tuple(bits))
    b = WatermarkKey(tuple(rnd.randint(0, 1) for _ in bits))
    assert bit_accuracy(a, b) == 1 - hamming(a, b) / a.M


def test_fpr_examples():
    assert fpr(0, 1) == 0.5
    assert fpr_exact(20, 28) == Fraction(1683218, 2 ** 28)
    assert abs(fpr(20, 28) - 6.2705e-3) < 5e-8
    assert fpr(19, 28) > 0.01
    assert abs(fpr(19, 28) - 1.785e-2) < 5e-6


def test_exact_and_beta_agree_everywhere():
    for M in range(1, 65):
        for tau in range(M + 1):
            assert abs(float(fpr_exact(tau, M)) - fpr(tau, M)) <= 1e-12


def test_beta_against_scipy():
    for a, b, x in [(1.5, 2.5, 0.3), (21, 8, 0.5), (0.5, 0.5, 0.9), (40, 3, 0.97)]:
        assert abs(betainc_regularized(a, b, x) - betainc(a, b, x)) < 1e-13


def test_fpr_monotone_and_boundaries():
    for M in (1, 7, 28, 64):
        vals = [fpr(t, M) for t in range(M + 1)]
        assert all(x >= y for x, y in zip(vals, vals[1:]))
        assert fpr(M, M) == 0.0
        # P(D > -1) = 1: one step below tau = 0
        assert float(fpr_exact(0, M) + Fraction(1, 2 ** M)) == 1.0


def test_fpr_domain():
    with pytest.raises(VerificationError):
        fpr(29, 28)
    with pytest.raises(VerificationError):
        fpr(-1, 28)


def test_thresholds():
    assert threshold_for_fpr(28, 0.01) == 20
    assert threshold_for_fpr(1, 0.6) == 0
    with pytest.raises(VerificationError):
        threshold_for_fpr(16, 1.0)


def test_threshold_16_by_enumeration():
    counts = np.zeros(17, dtype=np.int64)
    for outcome in itertools.product((0, 1), repeat=16):
        counts[sum(outcome)] += 1
    tails = [counts[tau + 1:].sum() / 2 ** 16 for tau in range(17)]
    expect = min(tau for tau in range(17) if tails[tau] <= 0.01)
    assert threshold_for_fpr(16, 0.01) == expect == 12 + 1


def test_binomial_band_matches_scipy():
    lo, hi = binomial_band(1000, 0.0063)
    assert binom.cdf(lo - 1, 1000, 0.0063) <= 0.005 <= binom.cdf(lo, 1000, 0.0063)
    assert binom.cdf(hi - 1, 1000, 0.0063) < 0.995 <= binom.cdf(hi, 1000, 0.0063)


def test_report_decision_rule():
    rep = DetectionReport(matches=21, M=28, threshold=20, fpr_at_threshold=fpr(20, 28), target_fpr=0.01)
    assert rep.watermarked and rep.min_matches == 21
    assert not DetectionReport(20, 28, 20, fpr(20, 28), 0.01).watermarked
    assert len(rep.csv_row()) == len(DetectionReport.CSV_HEADER)
    assert "watermarked" in rep.text()


class FixedExtractor(Extractor):
    """Emits logits that decode to a preset key, whatever the image."""

    def __init__(self, key: WatermarkKey):
        super().__init__(ExtractorConfig(key_bits=key.M, widths=(2, 2, 2, 2)))
        self.key = key

    def forward(self, images):
        n = 1 if images.dim() == 3 else images.shape[0]
        return (torch.tensor(self.key.bits, dtype=torch.float32) * 2 - 1).repeat(n, 1) * 5


def test_detect_own_and_foreign_key():
    key = sample_key(16, 3)
    ext = FixedExtractor(key)
    img = torch.rand(3, 32, 32)
    assert detect(ext, img, key).watermarked
    assert detect(ext, img, key).matches == 16
    other = WatermarkKey(tuple(1 - b for b in key.bits))
    assert not detect(ext, img, other).watermarked
    with pytest.raises(VerificationError):
        detect(ext, img, sample_key(28, 0))
    reps = detect_batch(ext, torch.rand(4, 3, 32, 32), key)
    assert all(r.watermarked for r in reps)
    with pytest.raises(VerificationError):
        detect_batch(ext, torch.rand(2, 3, 32, 32), [key])


def test_random_keys_rarely_detected():
    """Decoded bits against fresh random keys: detection rate inside the
    99% band around the calibrated tail."""
    ext = FixedExtractor(sample_key(16, 0))
    rng = np.random.default_rng(1)
    keys = [sample_key(16, rng) for _ in range(2000)]
    reps = detect_batch(ext, torch.rand(1, 3, 32, 32).repeat(2000, 1, 1, 1), keys)
    hits = sum(r.watermarked for r in reps)
    lo, hi = binomial_band(2000, fpr(threshold_for_fpr(16, 0.01), 16))
    assert lo <= hits <= hi


def test_key_database(tmp_path):
    db = KeyDatabase([("bob", sample_key(8, 1)), ("alice", sample_key(8, 2))])
    db.save(tmp_path / "db.tsv")
    again = KeyDatabase.load(tmp_path / "db.tsv")
    assert again.records == db.records
    with pytest.raises(VerificationError):
        db.add("bob", sample_key(8, 3))
    with pytest.raises(VerificationError):
        db.add("carol", sample_key(9, 3))
    with pytest.raises(VerificationError):
        KeyDatabase().M
    (tmp_path / "bad.tsv").write_text("no tab here\n")
    with pytest.raises(VerificationError):
        KeyDatabase.load(tmp_path / "bad.tsv")
    (tmp_path / "c.tsv").write_text("# comment\n\nx\t4:a\n")
    assert len(KeyDatabase.load(tmp_path / "c.tsv")) == 1


def test_duplicate_keys_warn_and_tie_break():
    key = sample_key(16, 4)
    with pytest.warns(UserWarning):
        db = KeyDatabase([("zed", key), ("amy", key)])
    assert db.duplicates() == [["amy", "zed"]]
    owner, rep = attribute(FixedExtractor(key), torch.rand(3, 32, 32), db)
    assert owner == "amy" and rep.watermarked


def test_attribution_single_and_order_invariant():
    key = sample_key(16, 5)
    ext = FixedExtractor(key)
    img = torch.rand(3, 32, 32)
    assert attribute(ext, img, KeyDatabase([("only", key)]))[0] == "only"
    rng = np.random.default_rng(0)
    records = [(f"u{i:02d}", sample_key(16, rng)) for i in range(16)] + [("true", key)]
    for perm in range(5):
        order = np.random.default_rng(perm).permutation(len(records))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            db = KeyDatabase([records[i] for i in order])
        owner, rep = attribute(ext, img, db)
        assert owner == "true" and rep.watermarked
    with pytest.raises(VerificationError):
        attribute(ext, img, KeyDatabase())


def test_nearest_owner_prefers_smaller_distance():
    a = WatermarkKey((0, 0, 0, 0))
    b = WatermarkKey((1, 1, 1, 0))
    db = KeyDatabase([("a", a), ("b", b)])
    assert nearest_owner(WatermarkKey((1, 0, 0, 0)), db)[0] == "a"
    assert nearest_owner(WatermarkKey((1, 1, 1, 1)), db)[0] == "b"
    assert math.isclose(bit_accuracy(b, WatermarkKey((1, 1, 1, 1))), 0.75)
