import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decl.denoisers import (
    DEFAULT_PARAMS,
    METHODS,
    DenoiserBank,
    DenoiserSpec,
    amplify_noise,
    apply_denoiser,
    build_bank,
    denoise_dataset,
    extract_noise,
    fit_denoiser,
)
from decl.errors import ShapeMismatchError
from decl.signal import Dataset, NoiseSpec, TimeSeries, snr_denoised, snr_noisy, synth_dataset

FS = 200.0


def _series(T=400, seed=0, d=1):
    rng = np.random.default_rng(seed)
    t = np.arange(T) / FS
    clean = np.sin(2 * np.pi * 5 * t)[:, None] * np.ones((1, d))
    return TimeSeries(clean + 0.1 * rng.normal(size=(T, d)), FS)


def _fitted(method, T=400, d=1, **params):
    data = synth_dataset(24, T, d, 2, NoiseSpec("gaussian", 0.2), seed=3)
    return fit_denoiser(DenoiserSpec(method, params), data), data


def test_bank_profiles_match_table_defaults():
    ecg = build_bank("ecg")
    assert len(ecg) == 10
    first = ecg.denoisers[0]
    assert first.method == "butterworth_bandpass"
    assert (first.params["order"], first.params["low_freq"], first.params["high_freq"]) == (5, 3.0, 45.0)
    assert ecg.names == ["butterworth_bandpass", "loess", "fir_bandpass", "median", "kalman",
                         "wavelet", "emd", "lms", "ica", "pca"]
    by = {d.method: d for d in ecg}
    assert by["loess"].params["fraction"] == 0.01
    assert by["wavelet"].params["level"] == 3
    assert (by["lms"].params["n"], by["lms"].params["mu"]) == (12, 0.01)
    assert by["kalman"].params["transition_covariance"] == 0.1

    eeg = {d.method: d for d in build_bank("eeg")}
    assert len(eeg) == 10
    assert (eeg["iir_notch"].params["f0"], eeg["iir_notch"].params["Q"]) == (40.0, 20.0)
    bw = eeg["butterworth_bandpass"].params
    assert (bw["order"], bw["low_freq"], bw["high_freq"]) == (9, 0.3, 40.0)
    assert "cca" in eeg and "wiener" in eeg

    general = {d.method: d for d in build_bank("general")}
    assert len(general) == 10
    assert (general["lms"].params["n"], general["lms"].params["mu"]) == (1, 0.01)
    assert "wiener" in general

    with pytest.raises(ValueError):
        build_bank("emg")


def test_spec_validation():
    with pytest.raises(ValueError):
        DenoiserSpec("butterworth_bandpass", {"low_freq": 50.0, "high_freq": 40.0})
    with pytest.raises(ValueError):
        DenoiserSpec("loess", {"fraction": 0.0})
    with pytest.raises(ValueError):
        DenoiserSpec("median", {"bogus": 1})
    with pytest.raises(ValueError):
        DenoiserSpec("gauss")
    with pytest.raises(ValueError):
        DenoiserBank("ecg", [DenoiserSpec("median")])
    with pytest.raises(ValueError):
        DenoiserBank("ecg", [DenoiserSpec("median"), DenoiserSpec("median")])


def test_infeasible_params_rejected():
    x = _series()
    with pytest.raises(ValueError):
        apply_denoiser(DenoiserSpec("butterworth_bandpass", {"low_freq": 3.0, "high_freq": 120.0}), x)
    with pytest.raises(ValueError):
        apply_denoiser(DenoiserSpec("wavelet", {"level": 8}), TimeSeries(np.ones(32), FS))
    with pytest.raises(ValueError):
        apply_denoiser(DenoiserSpec("iir_notch", {"f0": 150.0}), x)


@pytest.mark.parametrize("method", [m for m in METHODS])
@pytest.mark.parametrize("d", [1, 2])
def test_every_method_preserves_shape_and_finiteness(method, d):
    if method in ("ica", "pca", "cca"):
        spec, data = _fitted(method, d=d)
        x = data.samples[0]
    else:
        spec, x = DenoiserSpec(method), _series(d=d)
    out = apply_denoiser(spec, x)
    assert out.values.shape == x.values.shape
    assert np.all(np.isfinite(out.values))
    again = apply_denoiser(spec, x)
    assert np.array_equal(out.values, again.values)


def test_fitted_methods_require_fit_and_matching_shape():
    x = _series()
    with pytest.raises(ValueError):
        apply_denoiser(DenoiserSpec("pca"), x)
    spec, _ = _fitted("pca")
    with pytest.raises(ShapeMismatchError):
        apply_denoiser(spec, _series(T=200))
    with pytest.raises(ShapeMismatchError):
        apply_denoiser(spec, _series(d=2))


def test_pca_keeps_at_most_available_rank():
    spec, data = _fitted("pca", n_components=1000)
    # 24 windows: every training window lies in the fitted subspace
    out = apply_denoiser(spec, data.samples[0]).values
    np.testing.assert_allclose(out, data.values[0], atol=1e-4)
    low, _ = _fitted("pca", n_components=1)
    assert not np.allclose(apply_denoiser(low, data.samples[0]).values, data.values[0], atol=1e-3)


def test_ica_is_seeded():
    a, data = _fitted("ica", n_components=4, seed=1)
    b, _ = _fitted("ica", n_components=4, seed=1)
    x = data.samples[2]
    assert np.array_equal(apply_denoiser(a, x).values, apply_denoiser(b, x).values)


def test_median_constant_is_fixed_point():
    x = TimeSeries(np.full((50, 2), 3.25))
    assert np.array_equal(apply_denoiser(DenoiserSpec("median"), x).values, x.values)


def _bin_power(x, freq, fs):
    spectrum = np.abs(np.fft.rfft(x)) ** 2
    return spectrum[int(round(freq * len(x) / fs))]


def test_butterworth_removes_80hz():
    t = np.arange(400) / FS
    clean = np.sin(2 * np.pi * 5 * t)
    x = TimeSeries(clean + 0.5 * np.sin(2 * np.pi * 80 * t), FS)
    out = apply_denoiser(DenoiserSpec("butterworth_bandpass"), x).values[:, 0]
    before = _bin_power(x.values[:, 0], 80, FS)
    after = _bin_power(out, 80, FS)
    assert 10 * np.log10(before / after) >= 20


def test_wavelet_shrinks_white_noise_variance():
    x = TimeSeries(np.random.default_rng(2).normal(size=1024))
    out = apply_denoiser(DenoiserSpec("wavelet", {"level": 3}), x).values
    assert out.var() < x.values.var()


def test_matched_bandpass_improves_snr():
    # the denoised SNR takes the pre-injection series as its reference
    data = synth_dataset(40, 400, 1, 3, NoiseSpec("gaussian", 0.0), seed=5)
    spec = DenoiserSpec("butterworth_bandpass")
    wins = 0
    for i, clean in enumerate(data.samples):
        t = np.arange(400) / FS
        s = 0.5 * np.sin(2 * np.pi * 80 * t + i)[:, None]
        noisy = TimeSeries(clean.values + s, FS)
        den = apply_denoiser(spec, noisy)
        wins += snr_denoised(den, clean) > snr_noisy(noisy, s)
    assert wins == 40


@pytest.mark.parametrize("method", ["butterworth_bandpass", "fir_bandpass", "iir_notch"])
@settings(max_examples=20, deadline=None)
@given(a=st.floats(-50, 50).filter(lambda v: abs(v) > 1e-3), seed=st.integers(0, 100))
def test_linear_filters_are_homogeneous(method, a, seed):
    x = _series(seed=seed)
    spec = DenoiserSpec(method)
    lhs = apply_denoiser(spec, TimeSeries(a * x.values, FS)).values
    rhs = a * apply_denoiser(spec, x).values
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-9 * abs(a))


def test_extract_and_amplify_examples():
    assert np.array_equal(extract_noise(np.array([3.0, 1.0]), np.array([1.0, 1.0])), [2.0, 0.0])
    x = TimeSeries(np.array([1.0, 2.0, 3.0]))
    assert np.all(extract_noise(x, x).values == 0)
    assert np.array_equal(amplify_noise(np.array([1.0]), np.array([0.5]), beta=2.0), [2.0])
    assert np.array_equal(amplify_noise(x, extract_noise(x, x), beta=0.0, allow_zero=True).values,
                          x.values)
    with pytest.raises(ValueError):
        amplify_noise(x, x, beta=0.0)
    with pytest.raises(ValueError):
        amplify_noise(x, x, beta=-1.0)
    with pytest.raises(ShapeMismatchError):
        extract_noise(np.ones(3), np.ones(4))
    with pytest.raises(ShapeMismatchError):
        amplify_noise(np.ones(3), np.ones(4))


arrays = st.integers(2, 30).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(-1e3, 1e3), min_size=n, max_size=n),
        st.lists(st.floats(-1e3, 1e3), min_size=n, max_size=n),
    )
)


@settings(max_examples=100, deadline=None)
@given(arrays)
def test_extract_amplify_algebra(pair):
    x, x_d = (np.asarray(v) for v in pair)
    v = extract_noise(x, x_d)
    assert np.array_equal(x_d + v, x) or np.allclose(x_d + v, x, rtol=0, atol=1e-12 * np.abs(x).max())
    np.testing.assert_allclose(amplify_noise(x, v, 1.0), 2 * x - x_d, rtol=1e-12, atol=1e-9)


def test_denoise_dataset_fits_and_keeps_labels():
    data = synth_dataset(12, 64, 1, 2, NoiseSpec("gaussian", 0.2), seed=1)
    out = denoise_dataset(DenoiserSpec("pca", {"n_components": 2}), data)
    assert out.values.shape == data.values.shape
    assert np.array_equal(out.labels, data.labels)
    assert set(DEFAULT_PARAMS) == set(METHODS)
