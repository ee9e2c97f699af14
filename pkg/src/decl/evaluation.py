"""Downstream evaluation (linear probe, fine-tuning) and analysis reports."""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .denoisers import DenoiserBank, DenoiserSpec, apply_denoiser, fit_denoiser
from .errors import DegenerateInputError, LabelError, ShapeMismatchError, StratificationError
from .model import DeclNetwork, load_checkpoint
from .seeding import int_seed_for, rng_for, torch_generator_for
from .signal import Dataset, NoiseSpec, TimeSeries, inject_noise, snr_denoised, snr_noisy, snr_representation
from .trainer import ViewCache, precompute_denoised_views, view_errors


@dataclass
class EvalConfig:
    label_fraction: float = 1.0
    mode: str = "linear"
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    seed: int = 0
    standardize: bool = True  # linear mode: z-score features with train statistics

    def __post_init__(self):
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label_fraction must lie in (0, 1]")
        if self.mode not in ("linear", "finetune"):
            raise ValueError("mode must be 'linear' or 'finetune'")
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")


@dataclass
class MetricsReport:
    accuracy: float
    weighted_f1: float
    per_class_f1: np.ndarray
    confusion: np.ndarray

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes):
        conf = confusion_matrix(y_true, y_pred, n_classes)
        return cls(accuracy(conf), weighted_f1(conf), per_class_f1(conf), conf)

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            w.writerow(["accuracy", repr(float(self.accuracy))])
            w.writerow(["weighted_f1", repr(float(self.weighted_f1))])
            for c, f1 in enumerate(self.per_class_f1):
                w.writerow([f"f1_class_{c}", repr(float(f1))])
            for i, row in enumerate(self.confusion):
                for j, v in enumerate(row):
                    w.writerow([f"confusion_{i}_{j}", int(v)])
        return path


def confusion_matrix(y_true, y_pred, n_classes) -> np.ndarray:
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return conf


def accuracy(confusion) -> float:
    conf = np.asarray(confusion)
    if conf.size == 0 or conf.sum() == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(conf) / conf.sum())


def per_class_f1(confusion) -> np.ndarray:
    conf = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(conf)
    predicted = conf.sum(axis=0)
    support = conf.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return f1


def weighted_f1(confusion) -> float:
    """Support-weighted mean of per-class F1 (F1 is 0 where precision + recall is 0)."""
    conf = np.asarray(confusion, dtype=np.float64)
    if conf.size == 0 or conf.sum() == 0:
        raise ValueError("empty confusion matrix")
    support = conf.sum(axis=1)
    return float(np.sum(support / support.sum() * per_class_f1(conf)))


# ---------------------------------------------------------------------------
# splits


def stratified_subsample(labels, fraction, seed, purpose="subsample") -> np.ndarray:
    """Indices of a seeded per-class subsample keeping ``floor(fraction * count)`` of each class."""
    labels = np.asarray(labels)
    if fraction >= 1:
        return np.arange(len(labels))
    rng = rng_for(seed, purpose)
    picked = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        n = int(np.floor(fraction * len(members)))
        if n < 1:
            raise StratificationError(
                f"label_fraction={fraction} leaves class {c} ({len(members)} samples) empty"
            )
        picked.append(rng.choice(members, size=n, replace=False))
    return np.sort(np.concatenate(picked))


def split_dataset(data: Dataset, seed: int, fractions=(0.4, 0.2, 0.4)):
    """Stratified seeded train/valid/test split."""
    if data.labels is None:
        raise LabelError("splitting needs labels")
    rng = rng_for(seed, "split")
    parts = [[] for _ in fractions]
    bounds = np.cumsum(fractions) / np.sum(fractions)
    for c in np.unique(data.labels):
        members = rng.permutation(np.flatnonzero(data.labels == c))
        cuts = np.round(bounds * len(members)).astype(int)
        start = 0
        for p, stop in zip(parts, cuts):
            p.append(members[start:stop])
            start = stop
    return tuple(data.subset(np.sort(np.concatenate(p))) for p in parts)


# ---------------------------------------------------------------------------
# probe and fine-tuning


def _resolve_model(checkpoint) -> DeclNetwork:
    if isinstance(checkpoint, DeclNetwork):
        return checkpoint
    return load_checkpoint(checkpoint)[0]


def _check_labeled(*datasets):
    for d in datasets:
        if d.labels is None:
            raise LabelError("evaluation needs labeled datasets")


def _check_channels(model: DeclNetwork, data: Dataset):
    if data.channels != model.cfg.channels:
        raise ShapeMismatchError(
            f"checkpoint expects {model.cfg.channels} channel(s), data has {data.channels}"
        )


@torch.no_grad()
def pooled_features(model: DeclNetwork, values, batch_size=256) -> torch.Tensor:
    """Time-averaged inference-mode representations, ``(N, r)``."""
    was = model.training
    model.eval()
    x = torch.as_tensor(np.asarray(values), dtype=torch.float32)
    out = torch.cat([model.encoder(x[s : s + batch_size]).mean(dim=1)
                     for s in range(0, len(x), batch_size)])
    model.train(was)
    return out


class _Classifier(nn.Module):
    def __init__(self, encoder, r, n_classes):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(r, n_classes)

    def forward(self, x):
        return self.head(self.encoder(x).mean(dim=1))


def _fit(module, params, inputs, labels, cfg: EvalConfig, purpose):
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    loss_fn = nn.CrossEntropyLoss()
    y = torch.as_tensor(labels, dtype=torch.long)
    n = len(y)
    for epoch in range(cfg.epochs):
        order = rng_for(cfg.seed, f"{purpose}/shuffle/{epoch}").permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(order[s : s + cfg.batch_size])
            opt.zero_grad()
            loss_fn(module(inputs[idx]), y[idx]).backward()
            opt.step()


def linear_evaluate(checkpoint, train: Dataset, test: Dataset, cfg: EvalConfig) -> MetricsReport:
    """Train one affine layer on frozen, time-averaged representations.

    With ``cfg.standardize`` the features are z-scored with train-set statistics
    first. The classifier stays affine in the original features; only the
    optimisation is better conditioned.
    """
    _check_labeled(train, test)
    model = _resolve_model(checkpoint)
    _check_channels(model, train)
    _check_channels(model, test)
    n_classes = max(train.n_classes, test.n_classes)
    idx = stratified_subsample(train.labels, cfg.label_fraction, cfg.seed, "linear/subsample")
    feats = pooled_features(model, train.values[idx])
    test_feats = pooled_features(model, test.values)
    if cfg.standardize:
        mean, std = feats.mean(dim=0), feats.std(dim=0, unbiased=False).clamp_min(1e-8)
        feats, test_feats = (feats - mean) / std, (test_feats - mean) / std
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int_seed_for(cfg.seed, "linear/head"))
        head = nn.Linear(feats.shape[1], n_classes)
    _fit(head, head.parameters(), feats, train.labels[idx], cfg, "linear")
    with torch.no_grad():
        pred = head(test_feats).argmax(dim=1).numpy()
    return MetricsReport.from_predictions(test.labels, pred, n_classes)


def fine_tune(checkpoint, train: Dataset, test: Dataset, cfg: EvalConfig) -> MetricsReport:
    """Train encoder and classification head jointly (works across datasets with equal ``d``)."""
    _check_labeled(train, test)
    model = copy.deepcopy(_resolve_model(checkpoint))
    _check_channels(model, train)
    _check_channels(model, test)
    n_classes = max(train.n_classes, test.n_classes)
    idx = stratified_subsample(train.labels, cfg.label_fraction, cfg.seed, "finetune/subsample")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int_seed_for(cfg.seed, "finetune/head"))
        clf = _Classifier(model.encoder, model.cfg.encoder.out_channels, n_classes)
    clf.train()
    x = torch.as_tensor(train.values[idx])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int_seed_for(cfg.seed, "finetune/dropout"))
        _fit(clf, clf.parameters(), x, train.labels[idx], cfg, "finetune")
    clf.eval()
    with torch.no_grad():
        pred = clf(torch.as_tensor(test.values)).argmax(dim=1).numpy()
    return MetricsReport.from_predictions(test.labels, pred, n_classes)


def evaluate(checkpoint, train, test, cfg: EvalConfig) -> MetricsReport:
    fn = linear_evaluate if cfg.mode == "linear" else fine_tune
    return fn(checkpoint, train, test, cfg)


# ---------------------------------------------------------------------------
# reports


def _write_table(path, columns: dict):
    names = list(columns)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*columns.values()):
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


@dataclass
class ErrorReport:
    columns: dict  # "sample_index", "e_raw", "e_<denoiser>" -> per-sample values

    @property
    def error_columns(self):
        return [c for c in self.columns if c.startswith("e_")]

    def summary(self) -> dict:
        out = {}
        for c in self.error_columns:
            v = np.asarray(self.columns[c], dtype=np.float64)
            out[c] = {"mean": float(np.nanmean(v)), "median": float(np.nanmedian(v))}
        out["raw_minus_best_gap"] = self.gap()
        return out

    def gap(self) -> float:
        """mean(e_raw) - mean over samples of the best denoised error."""
        views = np.column_stack([self.columns[c] for c in self.error_columns if c != "e_raw"])
        return float(np.mean(self.columns["e_raw"]) - np.mean(np.nanmin(views, axis=1)))

    def to_csv(self, path):
        return _write_table(path, self.columns)


def reconstruction_error_report(checkpoint, data: Dataset, bank: DenoiserBank = None,
                                cache: ViewCache = None, beta: float = 2.0) -> ErrorReport:
    """Forward-only reconstruction errors of raw samples and of every denoised view."""
    model = _resolve_model(checkpoint)
    if cache is None:
        cache = precompute_denoised_views(data, bank, beta)
    e_raw = view_errors(model, data.values)
    e_views = view_errors(model, cache.denoised)
    columns = {"sample_index": np.arange(len(data)), "e_raw": e_raw}
    for j, name in enumerate(cache.names):
        columns[f"e_{name}"] = np.where(cache.valid[:, j], e_views[:, j], np.nan)
    return ErrorReport(columns)


@dataclass
class SNRReport:
    columns: dict

    def summary(self) -> dict:
        return {
            k: {"mean": float(np.nanmean(v)), "median": float(np.nanmedian(v))}
            for k, v in self.columns.items() if k != "sample_index"
        }

    def to_csv(self, path):
        return _write_table(path, self.columns)


def _safe(fn, *args):
    try:
        return fn(*args)
    except DegenerateInputError:
        return np.nan


def snr_report(checkpoint_init, checkpoint_final, data: Dataset, noise: NoiseSpec,
               denoiser: DenoiserSpec = None) -> SNRReport:
    """SNR of the noisy data, the denoised data and both models' representations.

    ``data`` holds the clean reference series. Each sample gets its own noise
    draw (seeded from ``noise.seed`` and the sample index), is denoised with
    ``denoiser`` (LOESS by default), and the representation SNR compares the
    encoding of the denoised series against the encoding of the clean one.
    Undefined SNR values are recorded as NaN.
    """
    denoiser = denoiser or DenoiserSpec("loess")
    init = _resolve_model(checkpoint_init)
    final = _resolve_model(checkpoint_final)
    noisy, injected = [], []
    for i, x in enumerate(data.samples):
        spec_i = replace(noise, seed=int_seed_for(noise.seed, f"snr_report/{i}"))
        a, b = inject_noise(x, spec_i)
        noisy.append(a.values)
        injected.append(b.values)
    noisy = np.stack(noisy)
    noisy_ds = Dataset(noisy, data.labels, data.n_classes, data.sample_rate)
    fitted = fit_denoiser(denoiser, noisy_ds)
    denoised = np.stack([apply_denoiser(fitted, s).values for s in noisy_ds.samples])
    cols = {"sample_index": np.arange(len(data))}
    cols["snr_raw"] = np.array([_safe(snr_noisy, n, s) for n, s in zip(noisy, injected)])
    cols["snr_denoised"] = np.array(
        [_safe(snr_denoised, dn, x) for dn, x in zip(denoised, data.values)]
    )
    for tag, model in (("init", init), ("final", final)):
        reps = _representations(model, denoised)
        refs = _representations(model, data.values)
        cols[f"snr_rep_{tag}"] = np.array(
            [_safe(snr_representation, a, b) for a, b in zip(reps, refs)]
        )
    return SNRReport(cols)


@torch.no_grad()
def _representations(model, values, batch_size=256):
    was = model.training
    model.eval()
    x = torch.as_tensor(np.asarray(values), dtype=torch.float32)
    out = torch.cat([model.encoder(x[s : s + batch_size]) for s in range(0, len(x), batch_size)])
    model.train(was)
    return out.double().numpy()
