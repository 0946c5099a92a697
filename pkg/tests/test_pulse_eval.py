import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import signal as sps

from uvpulse.pulse_eval import (EvalError, Spectrum, VideoResult, aggregate_metrics,
                                butterworth_bandpass, design_butterworth_bandpass,
                                detrend_smoothness_priors, dominant_frequency_pr, estimate_pr,
                                next_pow2, postprocess, power_spectrum, snr_db)
from oracles import dense_detrend, snr_oracle

FPS = 30.0


# --------------------------------------------------------------- detrend

def test_constant_signal_detrends_to_zero():
    assert np.abs(detrend_smoothness_priors(np.full(500, 3.7))).max() <= 1e-8


def test_linear_ramp_detrends_to_zero():
    x = np.linspace(-5, 20, 200)
    out = detrend_smoothness_priors(x)
    assert np.abs(out).max() <= 1e-6 * np.ptp(x)


@pytest.mark.parametrize("n", [3, 4, 5, 17, 200])
@pytest.mark.parametrize("lam", [1.0, 10.0, 100.0])
def test_banded_matches_dense_oracle(n, lam, rng):
    z = rng.normal(size=n).cumsum()
    np.testing.assert_allclose(detrend_smoothness_priors(z, lam), dense_detrend(z, lam), atol=1e-8)


def test_sinusoid_amplitude_preserved():
    t = np.arange(1800) / FPS
    x = np.sin(2 * np.pi * 1.2 * t)
    out = detrend_smoothness_priors(x, 100.0)
    mid = slice(300, -300)
    ratio = np.sqrt(2) * out[mid].std()
    assert abs(ratio - 1) <= 0.05
    ref = dense_detrend(x[:200], 100.0)
    assert abs(np.sqrt(2) * ref[50:150].std() - 1) <= 0.05


def test_detrend_needs_three_samples():
    with pytest.raises(EvalError):
        detrend_smoothness_priors([1.0, 2.0])


# ------------------------------------------------------------- band-pass

@pytest.mark.parametrize("fs", [25.0, 30.0, 60.0])
@pytest.mark.parametrize("order", [2, 4])
def test_design_matches_scipy_butter(fs, order):
    d = design_butterworth_bandpass(fs, (0.75, 2.5), order)
    b, a = sps.butter(order // 2, [0.75, 2.5], btype="bandpass", fs=fs)
    np.testing.assert_allclose(d.a, a, atol=1e-12)
    np.testing.assert_allclose(d.b, b, atol=1e-12)


@pytest.mark.parametrize("fs", [20.0, 30.0, 60.0])
def test_cutoffs_are_minus_3db(fs):
    d = design_butterworth_bandpass(fs)
    db = 20 * np.log10(np.abs(d.response([0.75, 2.5])))
    np.testing.assert_allclose(db, -10 * np.log10(2), atol=0.05)


def test_digital_matches_analog_prototype():
    d = design_butterworth_bandpass(FPS)
    f = np.linspace(0.1, 14.0, 20)
    dig = 20 * np.log10(np.abs(d.response(f)))
    ana = 20 * np.log10(d.analog_response(f))
    assert np.abs(dig - ana).max() <= 0.1


def test_dc_rejected():
    out = butterworth_bandpass(np.full(900, 5.0), FPS)
    assert np.abs(out[150:-150]).max() <= 1e-6


def test_passband_sinusoid_ratio():
    t = np.arange(3000) / FPS
    out = butterworth_bandpass(np.sin(2 * np.pi * 1.2 * t), FPS)
    ratio = np.sqrt(2) * out[600:-600].std()
    assert 0.95 <= ratio <= 1.0


@pytest.mark.parametrize("band", [(0.75, 16.0), (2.5, 0.75), (0.0, 2.5)])
def test_band_outside_nyquist_rejected(band):
    with pytest.raises(EvalError):
        design_butterworth_bandpass(FPS, band)


def test_odd_order_rejected():
    with pytest.raises(EvalError):
        design_butterworth_bandpass(FPS, order=3)


def test_fps_too_low_rejected():
    with pytest.raises(EvalError):
        butterworth_bandpass(np.zeros(100), 4.0)


@given(st.floats(0.01, 100.0))
def test_postprocess_linear_in_amplitude(k):
    rng = np.random.default_rng(5)
    x = rng.normal(size=400)
    np.testing.assert_allclose(postprocess(k * x, FPS), k * postprocess(x, FPS), rtol=1e-9, atol=1e-12)


# -------------------------------------------------------------- spectrum

def test_resolution_1800_samples():
    spec = power_spectrum(np.random.default_rng(0).normal(size=1800), FPS)
    assert spec.nfft == 2048
    assert spec.bin_width_bpm == pytest.approx(0.8789, abs=0.01)
    assert spec.bin_width_bpm == pytest.approx(60 * 30 / 2048)


@given(st.integers(8, 5000))
def test_resolution_law(n):
    spec = power_spectrum(np.ones(n), FPS)
    assert spec.nfft == next_pow2(n) and spec.nfft >= n and spec.nfft < 2 * n
    assert spec.bin_width_bpm == pytest.approx(60 * FPS / spec.nfft)


def test_exact_bin_sinusoid_single_peak():
    k = 82
    n = 2048
    x = np.sin(2 * np.pi * k * np.arange(n) / n)
    spec = power_spectrum(x, FPS)
    assert int(np.argmax(spec.power)) == k
    others = np.delete(spec.power, k)
    assert others.max() <= 1e-12 * spec.power[k]


@given(arrays(np.float64, st.integers(8, 300), elements=st.floats(-100, 100)))
def test_parseval(x):
    spec = power_spectrum(x, FPS)
    # one-sided spectrum: interior bins count twice
    full = spec.power.copy()
    full[1:-1] *= 2
    energy = float(np.sum(x * x))
    assert full.sum() / spec.nfft == pytest.approx(energy, rel=1e-6, abs=1e-9)


def test_pr_of_72_bpm():
    t = np.arange(1800) / FPS
    pr = dominant_frequency_pr(power_spectrum(np.sin(2 * np.pi * 1.2 * t), FPS))
    assert abs(pr.bpm - 72.0) <= 0.88
    assert pr.bin_width_bpm == pytest.approx(0.8789, abs=1e-3)


def test_larger_peak_wins():
    t = np.arange(1800) / FPS
    x = np.sin(2 * np.pi * 1.0 * t) + 2 * np.sin(2 * np.pi * 1.5 * t)
    assert abs(dominant_frequency_pr(power_spectrum(x, FPS)).bpm - 90.0) <= 0.88


def test_out_of_band_sinusoid_flagged_low_snr():
    t = np.arange(1800) / FPS
    pr, _ = estimate_pr(np.sin(2 * np.pi * 3.0 * t), FPS)
    assert pr.low_snr
    assert pr.bpm == pytest.approx(150.0, abs=0.9)


def test_ties_go_to_lower_frequency():
    freqs = np.linspace(0, 15, 16)
    power = np.zeros(16)
    power[[1, 2]] = 5.0
    spec = Spectrum(freqs, power, 30, 30.0)
    assert dominant_frequency_pr(spec, (0.5, 2.5)).bpm == 60.0


@given(arrays(np.float64, 40, elements=st.floats(0, 1e6)), st.floats(1e-3, 1e3))
def test_pr_invariant_to_spectrum_scaling(power, k):
    freqs = np.linspace(0, 3.9, 40)
    a = dominant_frequency_pr(Spectrum(freqs, power, 78, 30.0))
    b = dominant_frequency_pr(Spectrum(freqs, power * k, 78, 30.0))
    assert a.bpm == b.bpm


def test_empty_band_error():
    spec = Spectrum(np.array([0.0, 5.0]), np.ones(2), 2, 10.0)
    with pytest.raises(EvalError):
        dominant_frequency_pr(spec)


# ------------------------------------------------------------------- SNR

def synthetic_spectrum(signal_power, noise_power, gt=72.0):
    freqs = np.arange(0, 15.0, 0.05)
    bpm = freqs * 60
    power = np.zeros_like(freqs)
    sig = (np.abs(bpm - gt) <= 6) | (np.abs(bpm - 2 * gt) <= 6)
    noise = (bpm >= 45) & (bpm <= 250) & ~sig
    power[sig] = signal_power / sig.sum()
    power[noise] = noise_power / noise.sum()
    return Spectrum(freqs, power, 2 * len(freqs), 30.0)


def test_snr_nine_to_one():
    res = snr_db(synthetic_spectrum(9.0, 1.0), 72.0)
    assert res.db == pytest.approx(10 * math.log10(9), abs=1e-9)
    assert res.db == pytest.approx(9.542, abs=1e-3)


def test_snr_all_noise_capped():
    res = snr_db(synthetic_spectrum(0.0, 1.0), 72.0)
    assert res.db == -60.0 and res.capped


def test_snr_zero_noise_capped():
    res = snr_db(synthetic_spectrum(1.0, 0.0), 72.0)
    assert res.db == 60.0 and res.capped


def test_snr_vs_hand_partition_on_pulse_video():
    from uvpulse.frame_ops import PipelineSpec, run_pipeline
    from uvpulse.rppg_extract import extract_full_video, get_extractor
    from uvpulse.synth_bench import synthesize
    v = synthesize("stationary", seed=4, duration=8.0, noise_std=2.0)
    wins = run_pipeline(v.frames, v.landmarks, PipelineSpec.parse("tuv:64,mask:45", window_len=240))
    wave = extract_full_video(wins, get_extractor("pos"))
    _, spec = estimate_pr(wave.values, FPS)
    ref = snr_oracle(spec.freqs, spec.power, 72.0)
    assert snr_db(spec, 72.0).db == pytest.approx(ref, abs=1e-9)


# --------------------------------------------------------------- metrics

def rows_from(gt, est, snr=None, scen=None):
    snr = snr if snr is not None else [0.0] * len(gt)
    scen = scen or ["s"] * len(gt)
    return [VideoResult(f"v{i:03d}", sc, g, e, s) for i, (g, e, s, sc) in enumerate(zip(gt, est, snr, scen))]


def test_mae_rmse_fixture():
    rep = aggregate_metrics(rows_from([70, 84], [72, 80], [1.0, 3.0]))
    a = rep.overall
    assert a.mae == pytest.approx(3.0, abs=1e-12)
    assert a.rmse == pytest.approx(math.sqrt(10), abs=1e-12)
    # abs errors {2, 4}: population std 1 -> SE 1/sqrt(2)
    assert a.mae_se == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    # squared errors {4, 16}: std 6 -> sqrt(6 / sqrt(2))
    assert a.rmse_se == pytest.approx(math.sqrt(6 / math.sqrt(2)), abs=1e-12)
    assert a.snr_db == pytest.approx(2.0) and a.snr_se == pytest.approx(1 / math.sqrt(2))
    assert a.pearson_r == pytest.approx(1.0)  # two increasing points
    assert a.pearson_r_se is None


def test_perfect_estimates():
    a = aggregate_metrics(rows_from([60, 70, 80], [60, 70, 80])).overall
    assert a.mae == 0 and a.rmse == 0 and a.pearson_r == pytest.approx(1.0)


def test_single_row_r_undefined():
    a = aggregate_metrics(rows_from([60], [65])).overall
    assert a.pearson_r is None and a.mae == 5.0


def test_random_pairs_vs_formula_oracle():
    rng = np.random.default_rng(77)
    gt = rng.uniform(50, 120, 20)
    est = gt + rng.normal(0, 5, 20)
    snr = rng.normal(3, 2, 20)
    a = aggregate_metrics(rows_from(gt, est, snr)).overall
    e = est - gt
    n = 20
    mae = sum(abs(x) for x in e) / n
    mse = sum(x * x for x in e) / n
    mean_g, mean_e = sum(gt) / n, sum(est) / n
    cov = sum((g - mean_g) * (x - mean_e) for g, x in zip(gt, est))
    r = cov / math.sqrt(sum((g - mean_g) ** 2 for g in gt) * sum((x - mean_e) ** 2 for x in est))
    mae_sd = math.sqrt(sum((abs(x) - mae) ** 2 for x in e) / n)
    assert a.mae == pytest.approx(mae, abs=1e-12)
    assert a.rmse == pytest.approx(math.sqrt(mse), abs=1e-12)
    assert a.pearson_r == pytest.approx(r, abs=1e-12)
    assert a.pearson_r_se == pytest.approx(math.sqrt((1 - r * r) / (n - 2)), abs=1e-12)
    assert a.mae_se == pytest.approx(mae_sd / math.sqrt(n), abs=1e-12)
    assert a.snr_db == pytest.approx(sum(snr) / n, abs=1e-12)


def test_grouping_by_scenario():
    rep = aggregate_metrics(rows_from([70, 70, 80, 90], [71, 73, 80, 85],
                                      scen=["walk", "still", "walk", "still"]))
    assert list(rep.by_scenario) == ["still", "walk"]
    assert rep.by_scenario["still"].mae == pytest.approx(4.0)
    assert rep.by_scenario["walk"].mae == pytest.approx(0.5)
    assert rep.overall.n == 4


def test_aggregates_independent_of_row_order():
    rows = rows_from(*np.random.default_rng(1).uniform(50, 100, (2, 9)))
    a = aggregate_metrics(rows).overall
    b = aggregate_metrics(rows[::-1]).overall
    assert a == b


@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(40, 160)),
       arrays(np.float64, 30, elements=st.floats(40, 160)))
def test_metric_properties(gt, est):
    est = est[:len(gt)]
    a = aggregate_metrics(rows_from(gt, est)).overall
    assert 0 <= a.mae <= a.rmse + 1e-9
    if a.pearson_r is not None:
        assert -1 <= a.pearson_r <= 1


def test_no_rows_error():
    with pytest.raises(EvalError):
        aggregate_metrics([])
