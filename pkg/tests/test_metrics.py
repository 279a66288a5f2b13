import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from despeckle.errors import ConfigError, DimensionError, MissingInputError, UndefinedMetricError
from despeckle.metrics import (RoiSpec, cnr, enl, epi, evaluate_image, evaluate_set, msr, read_roi_config,
                               write_roi_config)


# -- naive reference implementations (pure Python loops) ----------------------

def naive_stats(img, rect):
    top, left, h, w = rect
    vals = [float(img[r][c]) for r in range(top, top + h) for c in range(left, left + w)]
    mu = sum(vals) / len(vals)
    var = sum((v - mu) ** 2 for v in vals) / len(vals)
    return mu, math.sqrt(var)


def naive_cnr(img, roi):
    mu_b, sd_b = naive_stats(img, roi.background_roi)
    terms = []
    for r in roi.signal_rois:
        mu, sd = naive_stats(img, r)
        terms.append(10 * math.log10((mu - mu_b) / math.sqrt(sd ** 2 + sd_b ** 2)))
    return sum(terms) / len(terms)


def naive_msr(img, roi):
    terms = [m / s for m, s in (naive_stats(img, r) for r in roi.signal_rois)]
    return sum(terms) / len(terms)


def naive_enl(img, roi):
    mu, sd = naive_stats(img, roi.background_roi)
    return mu * mu / (sd * sd)


def naive_epi(den, noisy, b):
    num = sum(abs(float(den[i + 1][j]) - float(den[i][j])) for i in range(b - 1) for j in range(len(den[0])))
    dd = sum(abs(float(noisy[i + 1][j]) - float(noisy[i][j])) for i in range(b - 1) for j in range(len(noisy[0])))
    return num / dd


def random_case(seed):
    """Random 64x64 image pair with a brighter upper band and non-overlapping ROIs."""
    rng = np.random.default_rng(seed)
    noisy = rng.random((64, 64)) * 0.3
    noisy[:32] += 0.5
    den = noisy + rng.normal(0, 0.05, noisy.shape)
    n_sig = int(rng.integers(1, 4))
    signals = []
    for k in range(n_sig):
        h, w = int(rng.integers(2, 9)), int(rng.integers(2, 17))
        signals.append((int(rng.integers(0, 32 - h)), int(rng.integers(0, 64 - w)), h, w))
    bh, bw = int(rng.integers(2, 17)), int(rng.integers(2, 33))
    background = (int(rng.integers(40, 64 - bh + 1)), int(rng.integers(0, 64 - bw + 1)), bh, bw)
    return den, noisy, RoiSpec(tuple(signals), background, int(rng.integers(2, 65)))


def rel_close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(b))


def test_oracle_agreement_100_random_images():
    for seed in range(100):
        den, noisy, roi = random_case(seed)
        dl, nl = den.tolist(), noisy.tolist()
        assert rel_close(cnr(den, roi), naive_cnr(dl, roi))
        assert rel_close(msr(den, roi), naive_msr(dl, roi))
        assert rel_close(enl(den, roi), naive_enl(dl, roi))
        assert rel_close(epi(den, noisy, roi), naive_epi(dl, nl, roi.info_boundary_row))


# -- hand examples -------------------------------------------------------------

def row_image(values):
    return np.array([values], dtype=np.float64)


def test_cnr_hand_example():
    # signal [7, 13]: mu 10, sigma 3; background [-2, 6]: mu 2, sigma 4
    img = row_image([7, 13, -2, 6])
    roi = RoiSpec(((0, 0, 1, 2),), (0, 2, 1, 2))
    assert cnr(img, roi) == 10 * math.log10(8 / 5)
    assert cnr(img, roi) == pytest.approx(2.0412, abs=5e-5)


def test_cnr_zero_and_undefined():
    # mu_1 = mu_b + sqrt(sigma_1^2 + sigma_b^2): 7 = 2 + 5
    img = row_image([4, 10, -2, 6])
    roi = RoiSpec(((0, 0, 1, 2),), (0, 2, 1, 2))
    assert cnr(img, roi) == 0.0
    with pytest.raises(UndefinedMetricError, match="#1"):
        cnr(row_image([0, 1, 5, 6]), roi)


def test_msr_hand_examples():
    img = row_image([2, 6, 6, 12, 0, 1])
    roi = RoiSpec(((0, 0, 1, 2), (0, 2, 1, 2)), (0, 4, 1, 2))
    assert msr(img, roi) == 2.5
    assert msr(row_image([0, 2, 0, 1]), RoiSpec(((0, 0, 1, 2),), (0, 2, 1, 2))) == 1.0
    with pytest.raises(UndefinedMetricError):
        msr(row_image([3, 3, 0, 1]), RoiSpec(((0, 0, 1, 2),), (0, 2, 1, 2)))


def test_enl_hand_examples():
    roi = RoiSpec(((0, 0, 1, 2),), (0, 2, 1, 2))
    assert enl(row_image([1, 2, 3, 9]), roi) == 4.0
    with pytest.raises(UndefinedMetricError):
        enl(row_image([1, 2, 5, 5]), roi)


def test_enl_exponential_law():
    img = np.random.default_rng(7).exponential(1.0, size=(1000, 1000))
    roi = RoiSpec(((0, 0, 1, 1),), (1, 0, 999, 1000))
    assert abs(enl(img, roi) - 1.0) <= 0.05


def test_epi_hand_examples():
    noisy = np.array([[0, 0], [2, 2]], dtype=float)
    den = np.array([[0, 0], [1, 1]], dtype=float)
    roi = RoiSpec(((0, 0, 1, 1),), (1, 1, 1, 1), 2)
    assert epi(den, noisy, roi) == 0.5
    assert epi(noisy, noisy, roi) == 1.0
    assert epi(np.full((2, 2), 0.3), noisy, roi) == 0.0
    with pytest.raises(UndefinedMetricError):
        epi(den, np.ones((2, 2)), roi)
    with pytest.raises(DimensionError):
        epi(den[:1], noisy, roi)


def test_epi_ignores_background_rows():
    noisy = np.array([[0.0], [1.0], [0.0], [5.0]])
    roi = RoiSpec(((0, 0, 1, 1),), (3, 0, 1, 1), 2)
    den = noisy.copy()
    den[3] = 100
    assert epi(den, noisy, roi) == 1.0


# -- invariances -----------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.floats(0.01, 100.0), c=st.floats(-10.0, 10.0))
def test_invariances(seed, k, c):
    den, noisy, roi = random_case(seed)
    assert rel_close(cnr(k * den, roi), cnr(den, roi))
    assert rel_close(msr(k * den, roi), msr(den, roi))
    assert rel_close(enl(k * den, roi), enl(den, roi))
    assert rel_close(epi(den + c, noisy + c, roi), epi(den, noisy, roi))
    assert rel_close(epi(noisy, noisy, roi), 1.0)


# -- reports -----------------------------------------------------------------------

def test_evaluate_image_flags_undefined():
    img = np.zeros((4, 4))
    img[0] = 1.0
    roi = RoiSpec(((0, 0, 1, 4),), (2, 0, 2, 4), 4)
    rep = evaluate_image("a", img, img, roi)
    assert rep.epi == 1.0
    assert rep.cnr is None and rep.msr is None and rep.enl is None
    assert set(rep.undefined) == {"CNR", "MSR", "ENL"}


def test_evaluate_set_means_and_errors():
    roi = RoiSpec(((0, 0, 1, 2),), (0, 2, 1, 2), None)
    a = row_image([1, 2, 3, 9])      # ENL 4
    b = row_image([1, 2, 0, 2])      # ENL 1
    rep = evaluate_set({"a": a, "b": b}, {"a": a, "b": b}, {"a": roi, "b": roi})
    assert [r.image_id for r in rep.rows] == ["a", "b"]
    assert rep.means["ENL"] == 2.5
    assert rep.means["MSR"] == pytest.approx((msr(a, roi) + msr(b, roi)) / 2, rel=1e-12)
    single = evaluate_set({"a": a}, {"a": a}, {"a": roi})
    assert single.means == single.rows[0].row()
    with pytest.raises(ConfigError):
        evaluate_set({"a": a}, {"a": a}, {})
    with pytest.raises(MissingInputError):
        evaluate_set({"a": a}, {}, {"a": roi})
    with pytest.raises(DimensionError):
        evaluate_set({"a": a}, {"a": a}, {"a": RoiSpec(((0, 0, 1, 2),), (0, 3, 1, 2))})


def test_roi_validation_and_roundtrip(tmp_path):
    with pytest.raises(ConfigError):
        RoiSpec(((0, 0, 4, 4),), (2, 2, 4, 4))
    rois = {"x": RoiSpec(((0, 0, 2, 3), (4, 4, 1, 1)), (10, 0, 5, 5), 8), "y": RoiSpec(((1, 1, 1, 1),), (3, 3, 1, 1), 3)}
    write_roi_config(tmp_path / "rois.tsv", rois)
    assert read_roi_config(tmp_path / "rois.tsv") == rois
    (tmp_path / "bad.tsv").write_text("x\t0,0,1\t1,1,1,1\t3\n")
    with pytest.raises(ConfigError, match="bad.tsv:1"):
        read_roi_config(tmp_path / "bad.tsv")
