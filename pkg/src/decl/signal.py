"""Time-series data model, persistence, synthetic data and SNR metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DegenerateInputError, LabelError, ShapeMismatchError
from .seeding import rng_for

NOISE_KINDS = ("gaussian", "sinusoidal_hf", "baseline_wander", "burst")
MANIFEST = "manifest.json"
PAYLOAD = "data.bin"
LABELS = "labels.csv"


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(getattr(values, "values", values))
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


@dataclass(eq=False)
class TimeSeries:
    """One sample: ``values`` is a ``(T, d)`` matrix."""

    values: np.ndarray
    sample_rate: float = 1.0

    def __post_init__(self):
        self.values = _as_matrix(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"expected a (T, d) matrix, got shape {self.values.shape}")
        T, d = self.values.shape
        if T < 2 or d < 1:
            raise ValueError(f"need T >= 2 and d >= 1, got T={T}, d={d}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("time series contains non-finite values")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.values, other.values)


@dataclass(eq=False)
class Dataset:
    """``N`` equally shaped series stored as one ``(N, T, d)`` float32 array."""

    values: np.ndarray
    labels: Optional[np.ndarray] = None
    n_classes: int = 0
    sample_rate: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.ndim != 3:
            raise ShapeMismatchError(f"dataset values must be (N, T, d), got {self.values.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.values),):
                raise ShapeMismatchError(
                    f"{len(self.labels)} labels for {len(self.values)} samples"
                )
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise LabelError(f"labels must lie in [0, {self.n_classes})")

    @classmethod
    def from_samples(cls, samples, labels=None, n_classes=0):
        samples = list(samples)
        rate = samples[0].sample_rate if samples else 1.0
        shapes = {s.values.shape for s in samples}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"samples have differing shapes {sorted(shapes)}")
        return cls(np.stack([s.values for s in samples]), labels, n_classes, rate)

    @property
    def samples(self) -> list[TimeSeries]:
        return [TimeSeries(v, self.sample_rate) for v in self.values]

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def __len__(self):
        return self.n_samples

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        labels = None if self.labels is None else self.labels[index]
        return Dataset(self.values[index], labels, self.n_classes, self.sample_rate)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            self.n_classes == other.n_classes
            and self.sample_rate == other.sample_rate
            and np.array_equal(self.values, other.values)
            and (self.labels is None or np.array_equal(self.labels, other.labels))
        )


@dataclass(frozen=True)
class NoiseSpec:
    """Additive noise description.

    ``std_or_amplitude`` is the standard deviation for ``gaussian`` and
    ``burst`` noise and the peak amplitude for the two sinusoidal kinds.
    """

    kind: str = "gaussian"
    std_or_amplitude: float = 0.0
    frequency: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if not self.std_or_amplitude >= 0:
            raise ValueError("std_or_amplitude must be non-negative")
        if self.kind in ("sinusoidal_hf", "baseline_wander"):
            if self.frequency is None or not self.frequency > 0:
                raise ValueError(f"{self.kind} noise needs a positive frequency")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "NoiseSpec":
        """Parse ``kind:level[:frequency]``, e.g. ``gaussian:0.3`` or ``sinusoidal_hf:0.5:80``."""
        parts = text.split(":")
        if len(parts) < 2 or len(parts) > 3:
            raise ValueError(f"cannot parse noise spec {text!r}")
        freq = float(parts[2]) if len(parts) == 3 else None
        return cls(parts[0], float(parts[1]), freq, seed)


def draw_noise(noise: NoiseSpec, shape, sample_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Draw one ``(T, d)`` noise realization from ``rng``."""
    T, d = shape
    level = noise.std_or_amplitude
    t = np.arange(T) / sample_rate
    if noise.kind == "gaussian":
        out = rng.normal(0.0, 1.0, size=(T, d)) * level
    elif noise.kind in ("sinusoidal_hf", "baseline_wander"):
        phase = rng.uniform(0.0, 2 * np.pi, size=d)
        out = level * np.sin(2 * np.pi * noise.frequency * t[:, None] + phase[None, :])
    else:
        # muscle-artifact-like: short gaussian bursts under a Hann envelope
        out = np.zeros((T, d))
        width = max(4, T // 10)
        n_bursts = max(1, T // (4 * width))
        for c in range(d):
            for _ in range(n_bursts):
                start = int(rng.integers(0, max(1, T - width)))
                seg = min(width, T - start)
                out[start:start + seg, c] += np.hanning(seg) * rng.normal(0.0, level, size=seg)
    return out


def inject_noise(x: TimeSeries, noise: NoiseSpec):
    """Return ``(noisy, injected)`` with ``noisy = x + injected``."""
    if not isinstance(x, TimeSeries):
        x = TimeSeries(x)
    rng = rng_for(noise.seed, "inject_noise")
    injected = draw_noise(noise, x.values.shape, x.sample_rate, rng).astype(x.values.dtype)
    if x.values.dtype == np.float32:
        # summing two float32 arrays in float64 is exact unless their magnitudes differ by
        # more than ~2**29, so noisy - injected recovers x bit for bit
        noisy = x.values.astype(np.float64) + injected.astype(np.float64)
        return TimeSeries(noisy, x.sample_rate), TimeSeries(injected.astype(np.float64), x.sample_rate)
    noisy = x.values + injected
    return TimeSeries(noisy, x.sample_rate), TimeSeries(injected, x.sample_rate)


def class_frequencies(n_classes: int, sample_rate: float) -> np.ndarray:
    """Base frequency (Hz) of each synthetic class, spread over 3-10% of the sample rate.

    The second harmonic of the top class stays at 20% of the rate, inside the
    3-45 Hz pass band of the default bank at 200 Hz.
    """
    if n_classes == 1:
        return np.array([0.03 * sample_rate])
    return sample_rate * (0.03 + 0.07 * np.arange(n_classes) / (n_classes - 1))


def synth_dataset(n_samples, T, d, n_classes, noise: NoiseSpec, seed, sample_rate=200.0) -> Dataset:
    """Labeled sinusoid-family dataset with additive noise.

    Class ``c`` is a base tone at ``class_frequencies(...)[c]`` plus a
    class-dependent second harmonic; every sample gets its own frequency,
    amplitude and phase jitter. Labels come in contiguous blocks in generator
    order. The waveform and noise streams are seeded separately, so changing
    only the noise level leaves the clean part untouched.
    """
    if n_classes < 2 or n_samples < n_classes:
        raise ValueError("need n_samples >= n_classes >= 2")
    if T < 16 or d < 1:
        raise ValueError("need T >= 16 and d >= 1")
    wave_rng = rng_for(seed, "synth/waveform")
    noise_rng = rng_for(seed, "synth/noise")
    labels = (np.arange(n_samples) * n_classes) // n_samples
    freqs = class_frequencies(n_classes, sample_rate)
    harmonic = np.linspace(0.0, 0.6, n_classes)
    t = np.arange(T) / sample_rate
    values = np.empty((n_samples, T, d), dtype=np.float64)
    for i, c in enumerate(labels):
        f = freqs[c] * wave_rng.uniform(0.95, 1.05)
        amp = wave_rng.uniform(0.8, 1.2)
        phase = wave_rng.uniform(0.0, 2 * np.pi, size=d)
        arg = 2 * np.pi * f * t[:, None] + phase[None, :]
        values[i] = amp * (np.sin(arg) + harmonic[c] * np.sin(2 * arg + 0.5))
    if noise.std_or_amplitude > 0:
        for i in range(n_samples):
            values[i] += draw_noise(noise, (T, d), sample_rate, noise_rng)
    return Dataset(values.astype(np.float32), labels, n_classes, float(sample_rate))


def _power_ratio_db(signal, residual) -> float:
    num = float(np.sum(np.square(signal, dtype=np.float64)))
    den = float(np.sum(np.square(residual, dtype=np.float64)))
    if den == 0.0:
        raise DegenerateInputError("noise power is zero; SNR is unbounded")
    if num == 0.0:
        raise DegenerateInputError("signal power is zero; SNR is -inf")
    return 10.0 * np.log10(num / den)


def snr_noisy(noisy, injected) -> float:
    """SNR (dB) of a noise-injected series against the realized injected noise."""
    noisy = np.asarray(getattr(noisy, "values", noisy), dtype=np.float64)
    injected = np.asarray(getattr(injected, "values", injected), dtype=np.float64)
    if noisy.shape != injected.shape:
        raise ShapeMismatchError(f"{noisy.shape} vs {injected.shape}")
    return _power_ratio_db(noisy, injected)


def snr_denoised(denoised, original) -> float:
    """SNR (dB) of a denoised series, treating its deviation from ``original`` as noise."""
    denoised = np.asarray(getattr(denoised, "values", denoised), dtype=np.float64)
    original = np.asarray(getattr(original, "values", original), dtype=np.float64)
    if denoised.shape != original.shape:
        raise ShapeMismatchError(f"{denoised.shape} vs {original.shape}")
    return _power_ratio_db(denoised, denoised - original)


def snr_representation(rep_denoised, rep_original) -> float:
    return snr_denoised(rep_denoised, rep_original)


def snr_per_channel(signal, residual) -> np.ndarray:
    """Per-channel SNR (dB) of ``signal`` against ``residual``; NaN where undefined."""
    signal = _as_matrix(signal).astype(np.float64)
    residual = _as_matrix(residual).astype(np.float64)
    num = np.sum(signal**2, axis=0)
    den = np.sum(residual**2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 10.0 * np.log10(num / den)
    out[(den == 0) | (num == 0)] = np.nan
    return out


def save_dataset(data: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "n_samples": data.n_samples,
        "length": data.length,
        "channels": data.channels,
        "n_classes": int(data.n_classes),
        "sample_rate": float(data.sample_rate),
        "dtype": "f32le",
    }
    (path / PAYLOAD).write_bytes(np.ascontiguousarray(data.values, dtype="<f4").tobytes())
    if data.labels is not None:
        (path / LABELS).write_text("".join(f"{int(v)}\n" for v in data.labels))
    elif (path / LABELS).exists():
        (path / LABELS).unlink()
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {path}")
    manifest = json.loads((path / MANIFEST).read_text())
    if manifest.get("dtype", "f32le") != "f32le":
        raise ValueError(f"unsupported dtype {manifest['dtype']!r}")
    shape = (int(manifest["n_samples"]), int(manifest["length"]), int(manifest["channels"]))
    raw = np.frombuffer((path / PAYLOAD).read_bytes(), dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise ShapeMismatchError(
            f"manifest declares {shape} ({int(np.prod(shape))} values) but payload holds {raw.size}"
        )
    values = raw.reshape(shape).astype(np.float32)
    labels = None
    n_classes = int(manifest.get("n_classes", 0))
    if (path / LABELS).is_file():
        labels = np.array([int(line) for line in (path / LABELS).read_text().split()], dtype=np.int64)
        if len(labels) != shape[0]:
            raise ShapeMismatchError(f"{len(labels)} labels for {shape[0]} samples")
        bad = (labels < 0) | (labels >= n_classes)
        if bad.any():
            raise LabelError(f"label {labels[bad][0]} out of range [0, {n_classes})")
    return Dataset(values, labels, n_classes, float(manifest.get("sample_rate", 1.0)))
