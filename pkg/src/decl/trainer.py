"""Pre-training: view cache, denoiser weight refresh and the optimisation loop."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .denoisers import DenoiserBank, apply_denoiser, build_bank, check_feasible, fit_denoiser
from .errors import NonFiniteLossError
from .model import (
    ARConfig,
    DeclNetwork,
    EncoderConfig,
    ModelConfig,
    build_model,
    latent_length,
    save_checkpoint,
    steps_for,
)
from .objectives import (
    LossConfig,
    WeightTable,
    ar_loss,
    contrastive_terms,
    denoiser_weights,
    joint_loss,
    reconstruction_error,
    weighted_contrastive_loss,
)
from .seeding import int_seed_for, rng_for, torch_generator_for
from .signal import Dataset, TimeSeries

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    aug_term: bool  # Gaussian-augmented reconstruction term in the AR loss
    contrastive: bool
    direction_term: bool
    weighting: Optional[str]  # "inverse_error", "uniform" or None


VARIANTS = {
    "decl": Variant(True, True, True, "inverse_error"),
    "decl_minus": Variant(False, True, True, "inverse_error"),
    "decl_star": Variant(True, True, False, "inverse_error"),
    "cl_equal": Variant(True, True, True, "uniform"),
    "only_ar": Variant(True, False, False, None),
    "only_ar_minus": Variant(False, False, False, None),
}


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    seed: int = 0
    variant: str = "decl"
    loss: LossConfig = field(default_factory=LossConfig)
    bank_profile: str = "ecg"
    warmup_epochs: int = 1
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ar: ARConfig = field(default_factory=ARConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.ar, dict):
            self.ar = ARConfig(**self.ar)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ValueError("weight_decay and warmup_epochs must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_json(cls, path, **overrides):
        data = json.loads(Path(path).read_text()) if path else {}
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def model_config(self, length: int, channels: int) -> ModelConfig:
        C = latent_length(length, self.encoder)
        return ModelConfig(length, channels, steps_for(C, self.loss.k_fraction), self.encoder, self.ar)


def num_workers() -> int:
    value = os.environ.get("DECL_NUM_WORKERS")
    return max(1, int(value)) if value else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# denoised / noise-enhanced views


@dataclass
class ViewCache:
    denoised: np.ndarray  # (N, m, T, d)
    enhanced: np.ndarray  # (N, m, T, d)
    valid: np.ndarray  # (N, m) bool
    names: list
    beta: float

    @property
    def n_entries(self) -> int:
        return int(self.valid.sum())

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            np.savez(fh, denoised=self.denoised, enhanced=self.enhanced, valid=self.valid,
                     names=np.array(self.names), beta=np.array(self.beta))
        return path

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(z["denoised"], z["enhanced"], z["valid"], [str(n) for n in z["names"]],
                       float(z["beta"]))


def _cache_key(data: Dataset, bank: DenoiserBank, beta: float) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.values).tobytes())
    h.update(repr(data.sample_rate).encode())
    h.update(json.dumps([d.to_dict() for d in bank], sort_keys=True).encode())
    h.update(repr(float(beta)).encode())
    return h.hexdigest()[:16]


def _denoise_column(spec, values, sample_rate):
    check_feasible(spec, values.shape[1], sample_rate)
    out = np.empty_like(values)
    ok = np.ones(len(values), dtype=bool)
    for i, x in enumerate(values):
        try:
            out[i] = apply_denoiser(spec, TimeSeries(x, sample_rate)).values
        except (ValueError, FloatingPointError, np.linalg.LinAlgError):
            ok[i] = False
            out[i] = x
    return out, ok


def precompute_denoised_views(data: Dataset, bank: DenoiserBank, beta: float = 2.0,
                              cache_dir=None) -> ViewCache:
    """Apply every denoiser to every sample and build the noise-enhanced counterparts.

    ``enhanced = x + beta * (x - denoised)``. A denoiser that fails on a
    sample is recorded in ``valid`` (with a warning) and that pair is left
    out of the losses. With ``cache_dir`` the result is stored under a
    content hash and reused on the next call.
    """
    cache_path = None
    if cache_dir is not None:
        cache_path = Path(cache_dir) / f"views_{bank.profile}_{_cache_key(data, bank, beta)}.npz"
        if cache_path.is_file():
            return ViewCache.load(cache_path)
    x = data.values.astype(np.float64)
    N, T, d = x.shape
    m = len(bank)
    fitted = [fit_denoiser(spec, data) for spec in bank]
    workers = min(num_workers(), m)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            columns = list(pool.map(_denoise_column, fitted, [x] * m, [data.sample_rate] * m))
    else:
        columns = [_denoise_column(spec, x, data.sample_rate) for spec in fitted]
    denoised = np.stack([c[0] for c in columns], axis=1)
    valid = np.stack([c[1] for c in columns], axis=1)
    for j, spec in enumerate(bank):
        bad = int((~valid[:, j]).sum())
        if bad:
            warnings.warn(f"{spec.name} failed on {bad} sample(s); excluded from the losses")
    enhanced = x[:, None] + beta * (x[:, None] - denoised)
    cache = ViewCache(denoised.astype(np.float32), enhanced.astype(np.float32), valid,
                      bank.names, float(beta))
    if cache_path is not None:
        cache.save(cache_path)
    return cache


# ---------------------------------------------------------------------------
# weights


@torch.no_grad()
def view_errors(model: DeclNetwork, views: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forward-only reconstruction error of each series in ``views`` (``(..., T, d)``)."""
    was = model.training
    model.eval()
    flat = views.reshape(-1, *views.shape[-2:])
    out = np.empty(len(flat))
    dtype = next(model.parameters()).dtype
    for start in range(0, len(flat), batch_size):
        xb = torch.as_tensor(flat[start : start + batch_size], dtype=dtype)
        future, pred = model.predict_from(model.encoder(xb))
        out[start : start + len(xb)] = reconstruction_error(future, pred).double().numpy()
    model.train(was)
    return out.reshape(views.shape[:-2])


def refresh_weights(model: DeclNetwork, cache: ViewCache, batch_size: int = 256) -> WeightTable:
    """Inverse-error weights from a no-update pass over the denoised views."""
    errors = view_errors(model, cache.denoised, batch_size)
    return denoiser_weights(np.where(cache.valid, errors, 1.0), mask=cache.valid)


# ---------------------------------------------------------------------------
# loss assembly


@dataclass
class StepLosses:
    l_ar: torch.Tensor
    l_cl: torch.Tensor
    total: torch.Tensor
    direction: torch.Tensor  # weighted direction-term sum, already divided by batch size


def step_losses(model: DeclNetwork, x, x_aug, cfg: TrainConfig, views=None, weights=None,
                valid=None, alpha=None) -> StepLosses:
    """Losses for one batch.

    ``x``/``x_aug``: ``(B, T, d)``. ``views``: ``(denoised, enhanced)``, each
    ``(B, m, T, d)``, or None when no contrastive term is active.
    ``weights``: ``(B, m)`` array. ``alpha`` overrides the variant's
    direction-term coefficient.
    """
    variant = VARIANTS[cfg.variant]
    B = x.shape[0]
    parts = [x, x_aug] if variant.aug_term else [x]
    if views is not None:
        xd, xn = views
        m = xd.shape[1]
        parts += [xd.reshape(B * m, *xd.shape[2:]), xn.reshape(B * m, *xn.shape[2:])]
    z_all = model.encoder(torch.cat(parts))
    z = z_all[:B]
    e_raw = reconstruction_error(*model.predict_from(z))
    if variant.aug_term:
        e_aug = reconstruction_error(*model.predict_from(z_all[B : 2 * B], z))
        l_ar = ar_loss(e_raw, e_aug)
    else:
        l_ar = ar_loss(e_raw)
    zero = l_ar.new_zeros(())
    if views is None:
        return StepLosses(l_ar, zero, l_ar, zero)
    off = 2 * B if variant.aug_term else B
    zd = z_all[off : off + B * m].reshape(B, m, *z.shape[1:])
    zn = z_all[off + B * m :].reshape(B, m, *z.shape[1:])
    first, reg = contrastive_terms(zn, z.unsqueeze(1).expand_as(zd), zd, cfg.loss.tau)
    if alpha is None:
        alpha = cfg.loss.alpha if variant.direction_term else 0.0
    w = np.asarray(weights, dtype=np.float64)
    if valid is not None:
        # excluded pairs carry zero weight; also keep their (finite) losses out of the graph
        mask = torch.as_tensor(np.asarray(valid), dtype=torch.bool)
        first = torch.where(mask, first, torch.zeros_like(first))
        reg = torch.where(mask, reg, torch.zeros_like(reg))
    l_cl = weighted_contrastive_loss(first - alpha * reg, w)
    direction = weighted_contrastive_loss(reg, w)
    return StepLosses(l_ar, l_cl, joint_loss(l_ar, l_cl, cfg.loss.gamma), direction)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class RunState:
    model: DeclNetwork
    epoch: int = 0
    step: int = 0
    weights: Optional[WeightTable] = None
    log: list = field(default_factory=list)


@dataclass
class PretrainResult:
    model: DeclNetwork
    initial_state: dict
    log: list
    weights: Optional[WeightTable]
    cache: Optional[ViewCache]
    weight_history: list


def _batch_weights(state: RunState, cache: ViewCache, idx, variant: Variant):
    if variant.weighting == "uniform" or state.weights is None:
        return WeightTable.uniform(len(idx), cache.valid.shape[1], cache.valid[idx]).weights
    return state.weights.weights[idx]


def write_metrics(log_rows, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "l_ar", "l_cl", "l_total"])
        for row in log_rows:
            w.writerow([row["epoch"], repr(row["l_ar"]), repr(row["l_cl"]), repr(row["l_total"])])


def pretrain(data: Dataset, cfg: TrainConfig, run_dir=None, cache: Optional[ViewCache] = None,
             bank: Optional[DenoiserBank] = None, cache_dir=None) -> PretrainResult:
    """Self-supervised pre-training of encoder + context module + predictor.

    Epochs before ``cfg.warmup_epochs`` optimise the AR loss alone; from then
    on contrastive variants add the weighted triplet loss, with weights
    refreshed at every epoch boundary. With ``run_dir`` the run writes
    ``checkpoint_init/``, ``checkpoint/``, ``metrics.csv`` and
    ``weights_epoch{E}.csv`` files.
    """
    variant = VARIANTS[cfg.variant]
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    N, T, d = data.values.shape
    model = build_model(cfg.model_config(T, d), cfg.seed)
    initial_state = {k: v.clone() for k, v in model.state_dict().items()}
    if run_dir is not None:
        save_checkpoint(model, run_dir / "checkpoint_init", step=0, seed=cfg.seed)

    if variant.contrastive and cache is None:
        bank = bank or build_bank(cfg.bank_profile)
        cache = precompute_denoised_views(data, bank, cfg.loss.beta, cache_dir)
    names = cache.names if cache is not None else []

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                            weight_decay=cfg.weight_decay)
    aug_gen = torch_generator_for(cfg.seed, "train/gaussian_aug")
    state = RunState(model)
    history = []
    x_all = torch.as_tensor(data.values, dtype=torch.float32)
    model.train()

    # dropout draws from the global torch stream; pin it to the run seed
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int_seed_for(cfg.seed, "train/dropout"))
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            contrastive_on = variant.contrastive and epoch >= cfg.warmup_epochs
            order = rng_for(cfg.seed, f"train/shuffle/{epoch}").permutation(N)
            sums = np.zeros(3)
            for start in range(0, N, cfg.batch_size):
                idx = np.sort(order[start : start + cfg.batch_size])
                x = x_all[idx]
                noise = torch.randn(x.shape, generator=aug_gen) * cfg.loss.aug_noise_std
                views = weights = valid = None
                if contrastive_on:
                    views = (torch.as_tensor(cache.denoised[idx]), torch.as_tensor(cache.enhanced[idx]))
                    weights = _batch_weights(state, cache, idx, variant)
                    valid = cache.valid[idx]
                losses = step_losses(model, x, x + noise, cfg, views, weights, valid)
                if not torch.isfinite(losses.total):
                    if run_dir is not None:
                        np.savez(run_dir / "nonfinite_batch.npz", index=idx, x=x.numpy())
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch}, step {state.step} "
                        f"(l_ar={losses.l_ar.item()}, l_cl={losses.l_cl.item()}); samples {idx.tolist()}"
                    )
                opt.zero_grad()
                losses.total.backward()
                opt.step()
                state.step += 1
                sums += len(idx) * np.array(
                    [losses.l_ar.item(), losses.l_cl.item(), losses.total.item()]
                )
            row = dict(zip(("l_ar", "l_cl", "l_total"), (sums / N).tolist()))
            row["epoch"] = epoch
            state.log.append(row)
            log.info("epoch %d  l_ar=%.5f  l_cl=%.5f  l_total=%.5f", epoch, row["l_ar"],
                     row["l_cl"], row["l_total"])

            if variant.weighting == "inverse_error" and epoch + 1 >= cfg.warmup_epochs:
                state.weights = refresh_weights(model, cache)
                model.train()
                history.append((epoch, state.weights))
                if run_dir is not None:
                    state.weights.to_csv(run_dir / f"weights_epoch{epoch}.csv", names)

    if variant.weighting == "uniform" and cache is not None:
        state.weights = WeightTable.uniform(N, len(names), cache.valid)
    model.eval()
    if run_dir is not None:
        save_checkpoint(model, run_dir / "checkpoint", step=state.step, seed=cfg.seed,
                        extra={"variant": cfg.variant, "epochs": cfg.epochs})
        write_metrics(state.log, run_dir / "metrics.csv")
        if state.weights is not None:
            state.weights.to_csv(run_dir / "weights_final.csv", names)
    return PretrainResult(model, initial_state, state.log, state.weights, cache, history)
