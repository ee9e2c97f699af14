import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decl.errors import DegenerateInputError, LabelError, ShapeMismatchError
from decl.signal import (
    Dataset,
    NoiseSpec,
    TimeSeries,
    inject_noise,
    load_dataset,
    save_dataset,
    snr_denoised,
    snr_noisy,
    snr_per_channel,
    snr_representation,
    synth_dataset,
)

from . import oracles


def test_timeseries_validation():
    assert TimeSeries([1.0, 2.0]).values.shape == (2, 1)
    with pytest.raises(ValueError):
        TimeSeries([1.0])
    with pytest.raises(ValueError):
        TimeSeries([1.0, np.nan])
    with pytest.raises(ValueError):
        TimeSeries([1.0, 2.0], sample_rate=0)


def test_synth_zero_noise_labels_in_order():
    d = synth_dataset(4, 16, 1, 2, NoiseSpec("gaussian", 0.0), seed=7)
    assert d.values.shape == (4, 16, 1)
    assert d.labels.tolist() == [0, 0, 1, 1]
    assert np.all(np.isfinite(d.values))


def test_synth_is_deterministic():
    a = synth_dataset(8, 32, 2, 2, NoiseSpec("gaussian", 0.3), seed=7)
    b = synth_dataset(8, 32, 2, 2, NoiseSpec("gaussian", 0.3), seed=7)
    assert np.array_equal(a.values, b.values)
    c = synth_dataset(8, 32, 2, 2, NoiseSpec("gaussian", 0.3), seed=8)
    assert not np.array_equal(a.values, c.values)


def test_synth_noise_std_matches_level():
    noisy = synth_dataset(10, 1000, 1, 2, NoiseSpec("gaussian", 0.3), seed=1)
    clean = synth_dataset(10, 1000, 1, 2, NoiseSpec("gaussian", 0.0), seed=1)
    diff = (noisy.values.astype(np.float64) - clean.values).ravel()
    assert diff.size >= 10_000
    assert abs(diff.std(ddof=1) - 0.3) < 0.03


def test_synth_classes_differ_in_frequency():
    d = synth_dataset(30, 400, 1, 3, NoiseSpec("gaussian", 0.0), seed=0)
    peaks = []
    for c in range(3):
        spec = np.abs(np.fft.rfft(d.values[d.labels == c, :, 0], axis=1)).mean(axis=0)
        peaks.append(int(np.argmax(spec)))
    assert len(set(peaks)) == 3


@pytest.mark.parametrize("bad", [dict(n_samples=1, n_classes=2), dict(n_samples=4, n_classes=1),
                                 dict(n_samples=4, n_classes=2, T=8)])
def test_synth_rejects_bad_sizes(bad):
    args = dict(n_samples=4, T=16, d=1, n_classes=2)
    args.update(bad)
    with pytest.raises(ValueError):
        synth_dataset(args["n_samples"], args["T"], args["d"], args["n_classes"],
                      NoiseSpec("gaussian", 0.1), seed=0)


def test_noise_spec_parse_and_validate():
    n = NoiseSpec.parse("sinusoidal_hf:0.5:80", seed=3)
    assert (n.kind, n.std_or_amplitude, n.frequency, n.seed) == ("sinusoidal_hf", 0.5, 80.0, 3)
    with pytest.raises(ValueError):
        NoiseSpec("sinusoidal_hf", 0.5)
    with pytest.raises(ValueError):
        NoiseSpec("pink", 0.5)
    with pytest.raises(ValueError):
        NoiseSpec.parse("gaussian")


def test_inject_zero_noise_is_identity():
    x = TimeSeries(np.linspace(0, 1, 50))
    noisy, injected = inject_noise(x, NoiseSpec("gaussian", 0.0, seed=2))
    assert np.all(injected.values == 0)
    assert np.array_equal(noisy.values, x.values)


@pytest.mark.parametrize("kind,freq", [("gaussian", None), ("sinusoidal_hf", 80.0),
                                       ("baseline_wander", 0.5), ("burst", None)])
def test_inject_additivity(kind, freq):
    x = TimeSeries(np.sin(np.arange(300) / 7.0).astype(np.float32), sample_rate=200.0)
    noisy, injected = inject_noise(x, NoiseSpec(kind, 0.4, freq, seed=5))
    assert np.array_equal(noisy.values - injected.values, x.values)
    assert np.any(injected.values != 0)


def test_inject_additivity_float64_within_rounding():
    x = TimeSeries(np.sin(np.arange(300) / 7.0))
    noisy, injected = inject_noise(x, NoiseSpec("gaussian", 0.4, seed=5))
    assert np.array_equal(noisy.values, x.values + injected.values)
    np.testing.assert_allclose(noisy.values - injected.values, x.values, rtol=0, atol=1e-15)


def test_inject_snr_matches_realized_noise():
    x = TimeSeries(np.sin(np.arange(3000) / 10.0))
    noisy, injected = inject_noise(x, NoiseSpec("gaussian", 0.5, seed=11))
    expected = 10 * math.log10(np.sum(noisy.values.astype(np.float64) ** 2)
                               / np.sum(injected.values.astype(np.float64) ** 2))
    assert abs(snr_noisy(noisy, injected) - expected) < 1.0
    assert abs(injected.values.std() - 0.5) < 0.05


def test_snr_examples():
    assert snr_noisy([2.0, 2.0], [2.0, 2.0]) == pytest.approx(0.0, abs=1e-12)
    assert snr_noisy([10.0], [1.0]) == pytest.approx(20.0, abs=1e-12)
    assert snr_denoised([1.0, 1.0], [0.0, 0.0]) == pytest.approx(0.0, abs=1e-12)
    assert snr_denoised([2.0], [1.0]) == pytest.approx(6.0206, abs=1e-4)
    assert snr_representation([1.0, 1.0], [0.0, 0.0]) == pytest.approx(0.0, abs=1e-12)
    assert snr_representation([3.0], [0.0]) == pytest.approx(0.0, abs=1e-12)


def test_snr_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        snr_noisy([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(DegenerateInputError):
        snr_denoised([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(DegenerateInputError):
        snr_representation(np.ones((3, 2)), np.ones((3, 2)))
    with pytest.raises(ShapeMismatchError):
        snr_noisy([1.0, 2.0], [1.0])


def test_snr_per_channel_nan_where_undefined():
    out = snr_per_channel(np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([[1.0, 0.0], [1.0, 0.0]]))
    assert out[0] == pytest.approx(0.0)
    assert np.isnan(out[1])


matrices = st.integers(1, 5).flatmap(
    lambda r: st.lists(st.lists(st.floats(-10, 10, allow_nan=False), min_size=r, max_size=r),
                       min_size=1, max_size=5)
)


@settings(max_examples=100, deadline=None)
@given(matrices, st.integers(0, 2**31 - 1))
def test_snr_matches_scalar_oracle(a, seed):
    a = np.asarray(a)
    b = a + np.random.default_rng(seed).normal(size=a.shape)
    if np.sum(a**2) == 0 or np.sum((a - b) ** 2) == 0 or np.sum(b**2) == 0:
        return
    assert abs(snr_noisy(a, b) - oracles.snr_ratio(a.tolist(), b.tolist())) < 1e-9
    assert abs(snr_denoised(a, b) - oracles.snr_vs_original(a.tolist(), b.tolist())) < 1e-9
    assert abs(snr_representation(a, b) - oracles.snr_vs_original(a.tolist(), b.tolist())) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 1e3), st.integers(0, 1000))
def test_snr_noisy_scale_invariant(c, seed):
    rng = np.random.default_rng(seed)
    x, s = rng.normal(size=20), rng.normal(size=20)
    assert snr_noisy(c * x, c * s) == pytest.approx(snr_noisy(x, s), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(1.1, 3.0), st.integers(0, 1000))
def test_larger_gaussian_noise_lowers_snr(a, factor, seed):
    x = TimeSeries(np.sin(np.arange(500) / 9.0))
    n1, s1 = inject_noise(x, NoiseSpec("gaussian", a, seed=seed))
    n2, s2 = inject_noise(x, NoiseSpec("gaussian", a * factor, seed=seed))
    assert snr_noisy(n1, s1) > snr_noisy(n2, s2)


def test_dataset_roundtrip_bit_exact(tmp_path):
    d = synth_dataset(6, 40, 2, 3, NoiseSpec("gaussian", 0.3), seed=4)
    save_dataset(d, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back == d
    assert back.values.tobytes() == d.values.tobytes()
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert manifest == {"n_samples": 6, "length": 40, "channels": 2, "n_classes": 3,
                        "sample_rate": 200.0, "dtype": "f32le"}


def test_unlabeled_roundtrip(tmp_path):
    d = Dataset(np.random.default_rng(0).normal(size=(3, 10, 1)))
    save_dataset(d, tmp_path)
    assert load_dataset(tmp_path) == d


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")
    d = synth_dataset(3, 16, 1, 2, NoiseSpec("gaussian", 0.1), seed=0)
    save_dataset(d, tmp_path)
    raw = (tmp_path / "data.bin").read_bytes()
    (tmp_path / "data.bin").write_bytes(raw[: len(raw) * 2 // 3])
    with pytest.raises(ShapeMismatchError):
        load_dataset(tmp_path)
    save_dataset(d, tmp_path)
    (tmp_path / "labels.csv").write_text("0\n1\n2\n")
    with pytest.raises(LabelError):
        load_dataset(tmp_path)


def test_dataset_label_validation():
    with pytest.raises(LabelError):
        Dataset(np.zeros((2, 4, 1)), [0, 2], n_classes=2)
    with pytest.raises(ShapeMismatchError):
        Dataset(np.zeros((2, 4, 1)), [0], n_classes=2)
