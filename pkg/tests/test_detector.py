import numpy as np
import pytest

from equirob import transforms as tf
from equirob.data import DatasetSpec, synth_dataset
from equirob.defense import DefenseConfig
from equirob.detector import (CORRUPTIONS, Calibration, auroc, calibrate,
                              corrupt, detect_then_defend, detection_score,
                              error_estimate)
from equirob.models import TrainConfig, build_model, descriptor_for, train
from tests.helpers import PointwiseModel

SPECS = [tf.hflip(), tf.rotate(10.0)]


@pytest.fixture(scope="module")
def trained():
    x, y = synth_dataset(DatasetSpec("segmentation", size=32, extent=16, seed=0))
    m = build_model(descriptor_for("segmentation"), seed=0)
    train(m, x, y, TrainConfig(epochs=6, lr=0.1, batch_size=8, seed=0))
    xe, ye = synth_dataset(DatasetSpec("segmentation", size=8, extent=16, seed=1))
    return m, xe, ye


def test_score_shape_and_nonnegative(trained):
    m, xe, _ = trained
    s = detection_score(m, xe, SPECS)
    assert s.shape == (8,) and (s >= 0).all()
    with pytest.raises(ValueError):
        detection_score(m, xe, [])


def test_pointwise_model_scores_near_zero():
    x = np.random.default_rng(0).uniform(0.3, 0.7, size=(2, 4, 16, 16))
    # PointwiseModel passes channels through; softmax of identical maps under
    # exact warps deviates only by interpolation error
    s = detection_score(PointwiseModel(), x, [tf.hflip()])
    assert np.all(s < 1e-12)  # hflip is exact, so zero deviation


def test_noise_raises_score(trained):
    m, xe, _ = trained
    clean = detection_score(m, xe, SPECS)
    noisy = detection_score(m, corrupt(xe, "gaussian_noise", 3, seed=0), SPECS)
    assert noisy.mean() > clean.mean()


# --- error estimator -------------------------------------------------------

def test_error_estimate_formula():
    sig = np.array([0.1, 0.2, 0.3])
    expected = np.sqrt(2 / np.pi) * np.mean(np.sqrt(sig ** 2 + 0.05 ** 2))
    assert error_estimate(sig, 0.05) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        error_estimate([], 0.1)
    with pytest.raises(ValueError):
        error_estimate([-0.1], 0.1)
    with pytest.raises(ValueError):
        error_estimate([0.1], -0.1)


def test_error_estimate_monte_carlo():
    """For centered Gaussian error with std sqrt(sigma_i^2 + B^2), the mean
    absolute error is sqrt(2/pi) times the std; the estimator averages this
    over the per-unit sensitivities."""
    rng = np.random.default_rng(0)
    sig = rng.uniform(0.05, 0.4, size=50)
    B = 0.1
    draws = rng.normal(0.0, np.sqrt(sig ** 2 + B ** 2), size=(200_000, 50))
    mc = np.abs(draws).mean()
    assert error_estimate(sig, B) == pytest.approx(mc, rel=5e-3)


# --- AUROC -----------------------------------------------------------------

def test_auroc_reference_cases():
    assert auroc([2, 3], [0, 1]) == 1.0
    assert auroc([0, 1], [2, 3]) == 0.0
    assert auroc([1, 1], [1, 1]) == 0.5
    # hand-computed: pos {1,3}, neg {2}: pairs -> (1<2)=0, (3>2)=1 -> 0.5
    assert auroc([1, 3], [2]) == 0.5
    with pytest.raises(ValueError):
        auroc([], [1])


def test_auroc_matches_pair_enumeration():
    rng = np.random.default_rng(1)
    pos = rng.normal(0.5, 1.0, size=37)
    neg = rng.normal(0.0, 1.0, size=23)
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    assert auroc(pos, neg) == pytest.approx(wins / (37 * 23), rel=1e-12)


# --- calibration and routing ----------------------------------------------

def test_calibrate_threshold_quantile():
    scores = np.arange(100, dtype=float)
    cal = calibrate(scores, quantile=0.95)
    assert cal.threshold == pytest.approx(np.quantile(scores, 0.95))
    assert cal.clean_score_summary["n"] == 100
    with pytest.raises(ValueError):
        calibrate([])


def test_calibration_json_roundtrip(tmp_path):
    cal = Calibration(threshold=0.5, quantile=0.9, B=0.1,
                      clean_score_summary={"mean": 0.2, "max": 0.6, "n": 10})
    p = tmp_path / "cal.json"
    cal.save(str(p))
    back = Calibration.load(str(p))
    assert back == cal


def test_detect_then_defend_routes_and_ledger(trained):
    m, xe, _ = trained
    clean_scores = detection_score(m, xe, SPECS)
    cal = calibrate(clean_scores, quantile=0.5)  # force some routing
    dcfg = DefenseConfig(objective="random_noise", epsilon_v=0.02, specs=SPECS)
    ledger = []
    preds = detect_then_defend(m, xe, cal, dcfg, SPECS, ledger=ledger)
    assert preds.shape == (8, 16, 16)
    assert len(ledger) == 8
    flagged = [e for e in ledger if e["defended"]]
    assert 0 < len(flagged) < 8
    for e in ledger:
        assert e["defense_s"] > 0 if e["defended"] else e["defense_s"] == 0.0
        assert e["inference_s"] > 0 and e["detection_s"] > 0


# --- corruptions -----------------------------------------------------------

@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_corruptions_in_range_and_change_input(kind, trained):
    _, xe, _ = trained
    out = corrupt(xe, kind, severity=2, seed=0)
    assert out.shape == xe.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert not np.array_equal(out, xe)


def test_corruption_unknown_kind():
    with pytest.raises(ValueError):
        corrupt(np.zeros((1, 3, 8, 8)), "fog", 1)


def test_corruption_severity_monotone(trained):
    _, xe, _ = trained
    d1 = np.abs(corrupt(xe, "gaussian_noise", 1, seed=0) - xe).mean()
    d3 = np.abs(corrupt(xe, "gaussian_noise", 3, seed=0) - xe).mean()
    assert d3 > d1
