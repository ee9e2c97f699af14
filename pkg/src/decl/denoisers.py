"""Classical denoiser bank plus noise extraction and amplification.

Every method runs channel by channel on a ``(T, d)`` series. PCA, ICA and
CCA are fitted over a whole dataset first (see :func:`fit_denoiser`); the
fitted spec is immutable and can be shared between workers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pywt
from scipy import ndimage, signal as sps

from .errors import ShapeMismatchError
from .signal import Dataset, TimeSeries

METHODS = (
    "butterworth_bandpass", "loess", "fir_bandpass", "median", "kalman", "wavelet",
    "emd", "lms", "ica", "pca", "wiener", "iir_notch", "cca",
)
FITTED_METHODS = ("ica", "pca", "cca")
LINEAR_METHODS = ("butterworth_bandpass", "fir_bandpass", "iir_notch")
PROFILES = ("ecg", "eeg", "general")

DEFAULT_PARAMS = {
    "butterworth_bandpass": {"order": 5, "low_freq": 3.0, "high_freq": 45.0},
    "loess": {"fraction": 0.01, "iterations": 0},
    "fir_bandpass": {"low_freq": 3.0, "high_freq": 45.0, "numtaps": 101},
    "median": {"window": 5},
    "kalman": {"transition_covariance": 0.1, "observation_covariance": 0.1, "transition_matrices": 1.0},
    "wavelet": {"level": 3},
    "emd": {"discard_imfs": 1},
    "lms": {"n": 12, "mu": 0.01, "delay": 1},
    "ica": {"n_components": 1000, "seed": 0, "max_iter": 200},
    "pca": {"n_components": 1000},
    "wiener": {"window": 3},
    "iir_notch": {"f0": 40.0, "Q": 20.0},
    "cca": {"n_components": 1000, "embed": 16},
}
# non-numeric options; kept apart so ``params`` stays a key -> number map
WAVELET_FAMILY = "db4"


@dataclass(frozen=True)
class DenoiserSpec:
    method: str
    params: dict = field(default_factory=dict)
    name: str = ""
    fitted: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown denoiser {self.method!r}")
        merged = {**DEFAULT_PARAMS[self.method], **self.params}
        unknown = set(merged) - set(DEFAULT_PARAMS[self.method])
        if unknown:
            raise ValueError(f"unknown parameter(s) {sorted(unknown)} for {self.method}")
        object.__setattr__(self, "params", merged)
        if not self.name:
            object.__setattr__(self, "name", self.method)
        _check_params(self.method, merged)

    @property
    def needs_fit(self) -> bool:
        return self.method in FITTED_METHODS

    def to_dict(self):
        return {"method": self.method, "name": self.name, "params": dict(self.params)}


@dataclass(frozen=True)
class DenoiserBank:
    profile: str
    denoisers: tuple

    def __post_init__(self):
        object.__setattr__(self, "denoisers", tuple(self.denoisers))
        if len(self.denoisers) < 2:
            raise ValueError("a bank needs at least two denoisers")
        names = [d.name for d in self.denoisers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate denoiser names in bank: {names}")

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.denoisers]

    def __len__(self):
        return len(self.denoisers)

    def __iter__(self):
        return iter(self.denoisers)


def _check_params(method, p):
    if method in ("butterworth_bandpass", "fir_bandpass"):
        if not 0 < p["low_freq"] < p["high_freq"]:
            raise ValueError("need 0 < low_freq < high_freq")
    if method == "butterworth_bandpass" and int(p["order"]) < 1:
        raise ValueError("order must be >= 1")
    if method == "fir_bandpass" and int(p["numtaps"]) < 3:
        raise ValueError("numtaps must be >= 3")
    if method == "loess" and not 0 < p["fraction"] <= 1:
        raise ValueError("loess fraction must lie in (0, 1]")
    if method in ("median", "wiener") and int(p["window"]) < 1:
        raise ValueError("window must be >= 1")
    if method == "kalman" and (p["transition_covariance"] < 0 or p["observation_covariance"] <= 0):
        raise ValueError("kalman covariances must be non-negative (observation > 0)")
    if method == "wavelet" and int(p["level"]) < 1:
        raise ValueError("wavelet level must be >= 1")
    if method == "emd" and int(p["discard_imfs"]) < 0:
        raise ValueError("discard_imfs must be >= 0")
    if method == "lms" and (int(p["n"]) < 1 or p["mu"] <= 0 or int(p["delay"]) < 1):
        raise ValueError("lms needs n >= 1, mu > 0, delay >= 1")
    if method in FITTED_METHODS and int(p["n_components"]) < 1:
        raise ValueError("n_components must be >= 1")
    if method == "cca" and int(p["embed"]) < 2:
        raise ValueError("cca embed must be >= 2")
    if method == "iir_notch" and (p["f0"] <= 0 or p["Q"] <= 0):
        raise ValueError("iir_notch needs f0 > 0 and Q > 0")


def build_bank(profile: str) -> DenoiserBank:
    """The ten-method bank for ``profile`` with its default hyperparameters."""
    S = DenoiserSpec
    if profile == "ecg":
        specs = [
            S("butterworth_bandpass", {"order": 5, "low_freq": 3.0, "high_freq": 45.0}),
            S("loess", {"fraction": 0.01}),
            S("fir_bandpass", {"low_freq": 3.0, "high_freq": 45.0}),
            S("median"),
            S("kalman", {"transition_covariance": 0.1, "observation_covariance": 0.1,
                         "transition_matrices": 1.0}),
            S("wavelet", {"level": 3}),
            S("emd"),
            S("lms", {"n": 12, "mu": 0.01}),
            S("ica", {"n_components": 1000}),
            S("pca", {"n_components": 1000}),
        ]
    elif profile == "eeg":
        specs = [
            S("butterworth_bandpass", {"order": 9, "low_freq": 0.3, "high_freq": 40.0}),
            S("wiener"),
            S("fir_bandpass", {"low_freq": 0.3, "high_freq": 40.0}),
            S("iir_notch", {"f0": 40.0, "Q": 20.0}),
            S("kalman", {"transition_covariance": 0.1, "observation_covariance": 0.9,
                         "transition_matrices": 1.0}),
            S("wavelet", {"level": 5}),
            S("emd"),
            S("cca", {"n_components": 1000}),
            S("ica", {"n_components": 1000}),
            S("pca", {"n_components": 1000}),
        ]
    elif profile == "general":
        specs = [
            S("butterworth_bandpass", {"order": 5, "low_freq": 3.0, "high_freq": 45.0}),
            S("loess", {"fraction": 0.01}),
            S("fir_bandpass", {"low_freq": 3.0, "high_freq": 45.0}),
            S("median"),
            S("kalman", {"transition_covariance": 0.1, "observation_covariance": 0.1,
                         "transition_matrices": 1.0}),
            S("wavelet", {"level": 3}),
            S("wiener"),
            S("lms", {"n": 1, "mu": 0.01}),
            S("ica", {"n_components": 1000}),
            S("pca", {"n_components": 1000}),
        ]
    else:
        raise ValueError(f"unknown bank profile {profile!r}; expected one of {PROFILES}")
    return DenoiserBank(profile, specs)


# ---------------------------------------------------------------------------
# single-channel kernels: 1-D float64 in, 1-D float64 out


def _nyquist_check(p, fs, *keys):
    nyq = fs / 2.0
    for k in keys:
        if not p[k] < nyq:
            raise ValueError(f"{k}={p[k]} Hz is not below the Nyquist frequency {nyq} Hz")


def check_feasible(spec: DenoiserSpec, length: int, sample_rate: float):
    """Raise ``ValueError`` if ``spec`` cannot run on series of this length and rate."""
    p = spec.params
    if spec.method in ("butterworth_bandpass", "fir_bandpass"):
        _nyquist_check(p, sample_rate, "low_freq", "high_freq")
    elif spec.method == "iir_notch":
        _nyquist_check(p, sample_rate, "f0")
    elif spec.method == "wavelet":
        max_level = pywt.dwt_max_level(length, pywt.Wavelet(WAVELET_FAMILY).dec_len)
        if int(p["level"]) > max_level:
            raise ValueError(
                f"wavelet level {int(p['level'])} too deep for length {length} (max {max_level})"
            )
    elif spec.method == "cca" and length < int(p["embed"]) + 1:
        raise ValueError(f"cca embed={int(p['embed'])} needs series longer than {int(p['embed'])}")


def _butterworth(x, p, fs):
    sos = sps.butter(int(p["order"]), [p["low_freq"], p["high_freq"]], btype="bandpass", fs=fs,
                     output="sos")
    return sps.sosfiltfilt(sos, x, padlen=min(len(x) - 1, 3 * (2 * len(sos) + 1)))


def _fir(x, p, fs):
    numtaps = min(int(p["numtaps"]), len(x))
    numtaps -= 1 - numtaps % 2  # odd length keeps the centred kernel zero-phase
    taps = sps.firwin(numtaps, [p["low_freq"], p["high_freq"]], pass_zero=False, fs=fs)
    return ndimage.convolve1d(x, taps, mode="reflect")


def _loess(x, p, fs):
    from statsmodels.nonparametric.smoothers_lowess import lowess

    t = np.arange(len(x), dtype=np.float64)
    return lowess(x, t, frac=p["fraction"], it=int(p["iterations"]), return_sorted=False)


def _median(x, p, fs):
    return ndimage.median_filter(x, size=int(p["window"]), mode="nearest")


def _wiener(x, p, fs):
    if np.ptp(x) == 0:
        return x.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        out = sps.wiener(x, mysize=int(p["window"]))
    return np.where(np.isfinite(out), out, x)


def _kalman(x, p, fs):
    """Scalar random-walk Kalman filter (state = level)."""
    a = p["transition_matrices"]
    q = p["transition_covariance"]
    r = p["observation_covariance"]
    out = np.empty_like(x)
    mean, var = x[0], r
    for t, obs in enumerate(x):
        if t:
            mean = a * mean
            var = a * a * var + q
        gain = var / (var + r)
        mean = mean + gain * (obs - mean)
        var = (1.0 - gain) * var
        out[t] = mean
    return out


def _wavelet(x, p, fs):
    level = int(p["level"])
    coeffs = pywt.wavedec(x, WAVELET_FAMILY, level=level, mode="symmetric")
    out = [coeffs[0]]
    for detail in coeffs[1:]:
        sigma = np.median(np.abs(detail)) / 0.6745
        thr = sigma * np.sqrt(2.0 * np.log(len(x)))
        out.append(pywt.threshold(detail, thr, mode="soft"))
    return pywt.waverec(out, WAVELET_FAMILY, mode="symmetric")[: len(x)]


def _emd(x, p, fs):
    from PyEMD import EMD

    discard = int(p["discard_imfs"])
    imfs = EMD()(x)
    if len(imfs) <= discard:
        return x.copy()
    return imfs[discard:].sum(axis=0)


def _lms(x, p, fs):
    """Adaptive line enhancer: predict x[t] from the delayed window x[t-delay-n+1 .. t-delay]."""
    n, mu, delay = int(p["n"]), float(p["mu"]), int(p["delay"])
    w = np.zeros(n)
    out = x.copy()
    for t in range(n + delay - 1, len(x)):
        u = x[t - delay - n + 1 : t - delay + 1][::-1]
        y = w @ u
        w += 2.0 * mu * (x[t] - y) * u
        out[t] = y
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("lms filter diverged; lower mu")
    return out


def _notch(x, p, fs):
    b, a = sps.iirnotch(p["f0"], p["Q"], fs=fs)
    return sps.filtfilt(b, a, x, padlen=min(len(x) - 1, 3 * max(len(a), len(b))))


_KERNELS = {
    "butterworth_bandpass": _butterworth,
    "loess": _loess,
    "fir_bandpass": _fir,
    "median": _median,
    "kalman": _kalman,
    "wavelet": _wavelet,
    "emd": _emd,
    "lms": _lms,
    "wiener": _wiener,
    "iir_notch": _notch,
}


# ---------------------------------------------------------------------------
# dataset-fitted methods


def _available_rank(mat):
    centred = mat - mat.mean(axis=0)
    return int(np.linalg.matrix_rank(centred)) if centred.size else 0


def _fit_pca(mat, p):
    from sklearn.decomposition import PCA

    k = min(int(p["n_components"]), _available_rank(mat))
    if k < 1:
        return None
    return PCA(n_components=k, svd_solver="full").fit(mat)


def _fit_ica(mat, p):
    from sklearn.decomposition import FastICA
    from sklearn.exceptions import ConvergenceWarning

    k = min(int(p["n_components"]), _available_rank(mat))
    if k < 1:
        return None
    model = FastICA(n_components=k, whiten="unit-variance", random_state=int(p["seed"]),
                    max_iter=int(p["max_iter"]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return model.fit(mat)


def _embed(x, width):
    return np.lib.stride_tricks.sliding_window_view(x, width)


def _unembed(rows, length):
    """Diagonal averaging of a trajectory matrix back to a series."""
    width = rows.shape[1]
    acc = np.zeros(length)
    cnt = np.zeros(length)
    for j in range(width):
        acc[j : j + len(rows)] += rows[:, j]
        cnt[j : j + len(rows)] += 1
    return acc / cnt


def _fit_cca(series_rows, p):
    """BSS-CCA on delay embeddings: sources ordered by lag-one autocorrelation."""
    width = int(p["embed"])
    if series_rows.shape[1] < width + 1:
        raise ValueError(f"cca embed={width} needs series longer than {width}")
    lead, lag = [], []
    for s in series_rows:
        e = _embed(s, width)
        lead.append(e[1:])
        lag.append(e[:-1])
    X = np.concatenate(lead)
    Y = np.concatenate(lag)
    mean = X.mean(axis=0)
    Xc, Yc = X - mean, Y - Y.mean(axis=0)
    n = len(Xc)
    cxx = Xc.T @ Xc / n
    cyy = Yc.T @ Yc / n
    cxy = Xc.T @ Yc / n
    evals, evecs = np.linalg.eigh(cxx)
    keep = evals > evals.max() * 1e-10
    if not keep.any():
        return None
    wx = evecs[:, keep] / np.sqrt(evals[keep])
    evals_y, evecs_y = np.linalg.eigh(cyy)
    keep_y = evals_y > evals_y.max() * 1e-10
    cyy_inv = (evecs_y[:, keep_y] / evals_y[keep_y]) @ evecs_y[:, keep_y].T
    m = wx.T @ cxy @ cyy_inv @ cxy.T @ wx
    corr, rot = np.linalg.eigh(m)
    order = np.argsort(corr)[::-1]
    unmix = wx @ rot[:, order]
    k = min(int(p["n_components"]), unmix.shape[1])
    mix = np.linalg.pinv(unmix)
    return {"mean": mean, "unmix": unmix[:, :k], "mix": mix[:k], "width": width}


def _apply_fitted(method, state, x):
    if state is None:
        return x.copy()
    if method == "cca":
        rows = _embed(x, state["width"])
        src = (rows - state["mean"]) @ state["unmix"]
        return _unembed(src @ state["mix"] + state["mean"], len(x))
    return state.inverse_transform(state.transform(x[None, :]))[0]


def fit_denoiser(spec: DenoiserSpec, data) -> DenoiserSpec:
    """Fit a dataset-level method on ``data``'s windows; other methods pass through.

    Each channel gets its own model, with the dataset's samples as
    observations. Components kept are ``min(n_components, available rank)``.
    """
    if not spec.needs_fit:
        return spec
    values = np.asarray(getattr(data, "values", data), dtype=np.float64)
    if values.ndim == 2:
        values = values[:, :, None]
    states = []
    for c in range(values.shape[2]):
        rows = values[:, :, c]
        if spec.method == "pca":
            states.append(_fit_pca(rows, spec.params))
        elif spec.method == "ica":
            states.append(_fit_ica(rows, spec.params))
        else:
            states.append(_fit_cca(rows, spec.params))
    return replace(spec, fitted=(values.shape[1], tuple(states)))


def apply_denoiser(spec: DenoiserSpec, x) -> TimeSeries:
    """Denoise ``x`` channel by channel; returns a series of identical shape."""
    if not isinstance(x, TimeSeries):
        x = TimeSeries(x)
    check_feasible(spec, x.length, x.sample_rate)
    values = x.values.astype(np.float64)
    out = np.empty_like(values)
    if spec.needs_fit:
        if spec.fitted is None:
            raise ValueError(f"{spec.name} must be fitted on a dataset first (fit_denoiser)")
        length, states = spec.fitted
        if length != x.length or len(states) != x.channels:
            raise ShapeMismatchError(
                f"{spec.name} was fitted on ({length}, {len(states)}) series, got {values.shape}"
            )
        for c in range(x.channels):
            out[:, c] = _apply_fitted(spec.method, states[c], values[:, c])
    else:
        kernel = _KERNELS[spec.method]
        for c in range(x.channels):
            out[:, c] = kernel(values[:, c], spec.params, x.sample_rate)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{spec.name} produced non-finite output")
    return TimeSeries(out, x.sample_rate)


def denoise_dataset(spec: DenoiserSpec, data: Dataset) -> Dataset:
    spec = fit_denoiser(spec, data)
    out = np.stack([apply_denoiser(spec, s).values for s in data.samples])
    return Dataset(out.astype(np.float32), data.labels, data.n_classes, data.sample_rate)


def _values(x):
    return np.asarray(getattr(x, "values", x))


def _like(x, out):
    if isinstance(x, TimeSeries):
        return TimeSeries(out, x.sample_rate)
    return out


def extract_noise(x, x_d):
    """The part of ``x`` a denoiser removed: ``x - x_d``."""
    a, b = _values(x), _values(x_d)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")
    return _like(x, a - b)


def amplify_noise(x, v, beta: float = 2.0, allow_zero: bool = False):
    """Noise-enhanced counterpart ``x + beta * v``."""
    a, b = _values(x), _values(v)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{a.shape} vs {b.shape}")
    if beta < 0 or (beta == 0 and not allow_zero):
        raise ValueError("beta must be positive")
    return _like(x, a + beta * b)
