"""Convolutional encoder, transformer context module and future-step predictor."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

N_BLOCKS = 3

# even filter widths with padding='same' make torch pad a copy; harmless
warnings.filterwarnings("ignore", message="Using padding='same' with even kernel")


@dataclass
class EncoderConfig:
    filter_width: int = 8
    block_channels: list = field(default_factory=lambda: [64, 128, 128])
    pool_width_stride: int = 2
    dropout: float = 0.35

    def __post_init__(self):
        self.block_channels = [int(c) for c in self.block_channels]
        if len(self.block_channels) != N_BLOCKS or min(self.block_channels) < 1:
            raise ValueError("block_channels must hold three positive ints")
        if self.filter_width < 1 or self.pool_width_stride < 1:
            raise ValueError("filter_width and pool_width_stride must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def out_channels(self) -> int:
        return self.block_channels[-1]


@dataclass
class ARConfig:
    layers: int = 4
    heads: int = 4
    hidden: int = 100
    mlp_dim: int = 64
    mlp_dropout: float = 0.1

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.mlp_dim < 1:
            raise ValueError("layers, heads and mlp_dim must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")


@dataclass
class ModelConfig:
    input_length: int
    channels: int = 1
    k_steps: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ar: ARConfig = field(default_factory=ARConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.ar, dict):
            self.ar = ARConfig(**self.ar)
        if not self.k_steps:
            self.k_steps = steps_for(self.latent_length, 0.3)
        if not 1 <= self.k_steps < self.latent_length:
            raise ValueError(f"k_steps={self.k_steps} must lie in [1, C={self.latent_length})")

    @property
    def latent_length(self) -> int:
        return latent_length(self.input_length, self.encoder)

    @property
    def context_length(self) -> int:
        return self.latent_length - self.k_steps

    def to_dict(self):
        return asdict(self)


@dataclass
class Representation:
    """Encoder output for one sample, ``(C, r)``."""

    values: np.ndarray


@dataclass
class ContextVector:
    values: np.ndarray


def latent_length(T: int, cfg: EncoderConfig) -> int:
    """Timesteps after the three pooling stages; raises if ``T`` is too short."""
    p = cfg.pool_width_stride
    if T < 2 * p**N_BLOCKS:
        raise ValueError(f"input length {T} is too short for three pooling stages (need >= {2 * p**N_BLOCKS})")
    C = T
    for _ in range(N_BLOCKS):
        C //= p
    return C


def steps_for(C: int, k_fraction: float) -> int:
    """Number of predicted timesteps for a latent length ``C``."""
    return int(min(max(round(k_fraction * C), 1), C - 1))


class Encoder(nn.Module):
    """Three conv -> batchnorm -> ReLU -> maxpool -> dropout blocks.

    Input ``(B, T, d)``, output ``(B, C, r)``.
    """

    def __init__(self, channels: int, cfg: EncoderConfig):
        super().__init__()
        blocks = []
        in_ch = channels
        for out_ch in cfg.block_channels:
            blocks += [
                nn.Conv1d(in_ch, out_ch, cfg.filter_width, padding="same", bias=False),
                nn.BatchNorm1d(out_ch),
                nn.ReLU(),
                nn.MaxPool1d(cfg.pool_width_stride, cfg.pool_width_stride),
                nn.Dropout(cfg.dropout),
            ]
            in_ch = out_ch
        self.net = nn.Sequential(*blocks)

    def forward(self, x):
        return self.net(x.transpose(1, 2)).transpose(1, 2)


class ContextModule(nn.Module):
    """Transformer over a representation prefix; the context is a summary token's final state."""

    def __init__(self, r: int, max_len: int, cfg: ARConfig):
        super().__init__()
        self.max_len = max_len
        self.proj = nn.Linear(r, cfg.hidden)
        self.summary_token = nn.Parameter(torch.zeros(1, 1, cfg.hidden))
        self.position = nn.Parameter(torch.zeros(1, max_len + 1, cfg.hidden))
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                cfg.hidden, cfg.heads, dim_feedforward=cfg.mlp_dim, dropout=cfg.mlp_dropout,
                activation="relu", batch_first=True, norm_first=True,
            )
            for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(cfg.hidden)
        nn.init.normal_(self.summary_token, std=0.02)
        nn.init.normal_(self.position, std=0.02)

    def forward(self, z_prefix):
        B, t, _ = z_prefix.shape
        if t < 1:
            raise ValueError("context prefix is empty")
        if t > self.max_len:
            raise ValueError(f"prefix of {t} steps exceeds the {self.max_len} positions")
        h = self.proj(z_prefix)
        h = torch.cat([self.summary_token.expand(B, -1, -1), h], dim=1) + self.position[:, : t + 1]
        for layer in self.layers:
            h = layer(h)
        return self.norm(h[:, 0])


class FuturePredictor(nn.Module):
    """Shared map ``W: h -> r`` followed by one elementwise affine head per future step."""

    def __init__(self, hidden: int, r: int, k_steps: int):
        super().__init__()
        self.W = nn.Linear(hidden, r, bias=False)
        self.step_scale = nn.Parameter(torch.ones(k_steps, r))
        self.step_shift = nn.Parameter(torch.zeros(k_steps, r))

    def forward(self, c, k: int):
        if not 1 <= k <= self.step_scale.shape[0]:
            raise ValueError(f"k={k} outside [1, {self.step_scale.shape[0]}]")
        base = self.W(c).unsqueeze(1)
        return base * self.step_scale[:k] + self.step_shift[:k]


class DeclNetwork(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        r = cfg.encoder.out_channels
        self.encoder = Encoder(cfg.channels, cfg.encoder)
        self.context = ContextModule(r, cfg.latent_length, cfg.ar)
        self.predictor = FuturePredictor(cfg.ar.hidden, r, cfg.k_steps)

    def forward(self, x):
        return self.encoder(x)

    def predict_from(self, z_source, z_target=None):
        """Split at ``t = C - k``; predict the last ``k`` rows of ``z_target`` from ``z_source``'s prefix.

        Returns ``(future, prediction)``, each ``(B, k, r)``.
        """
        k = self.cfg.k_steps
        z_target = z_source if z_target is None else z_target
        t = z_source.shape[1] - k
        c = self.context(z_source[:, :t])
        return z_target[:, t : t + k], self.predictor(c, k)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count for ``cfg``."""
    enc = cfg.encoder
    total = 0
    in_ch = cfg.channels
    for out_ch in enc.block_channels:
        total += in_ch * out_ch * enc.filter_width + 2 * out_ch
        in_ch = out_ch
    r, h, f = enc.out_channels, cfg.ar.hidden, cfg.ar.mlp_dim
    total += r * h + h  # input projection
    total += h + (cfg.latent_length + 1) * h  # summary token + positions
    per_layer = (3 * h * h + 3 * h) + (h * h + h) + (h * f + f) + (f * h + h) + 4 * h
    total += cfg.ar.layers * per_layer + 2 * h
    total += h * r + 2 * cfg.k_steps * r
    return total


def build_model(cfg: ModelConfig, seed: int = 0) -> DeclNetwork:
    from .seeding import int_seed_for

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int_seed_for(seed, "model/init"))
        return DeclNetwork(cfg)


def _as_batch(x):
    values = np.asarray(getattr(x, "values", x))
    if values.ndim == 1:
        values = values[:, None]
    return torch.as_tensor(values, dtype=torch.float32)[None]


def _dtype(model):
    return next(model.parameters()).dtype


@torch.no_grad()
def encode(model: DeclNetwork, x) -> Representation:
    """Inference-mode representation of one series."""
    was = model.training
    model.eval()
    z = model.encoder(_as_batch(x).to(_dtype(model)))[0]
    model.train(was)
    return Representation(z.numpy())


@torch.no_grad()
def summarize_context(model: DeclNetwork, z_prefix) -> ContextVector:
    was = model.training
    model.eval()
    z = torch.as_tensor(np.asarray(getattr(z_prefix, "values", z_prefix)), dtype=_dtype(model))
    c = model.context(z[None])[0]
    model.train(was)
    return ContextVector(c.numpy())


@torch.no_grad()
def predict_future(model: DeclNetwork, c, k: int) -> np.ndarray:
    was = model.training
    model.eval()
    c = torch.as_tensor(np.asarray(getattr(c, "values", c)), dtype=_dtype(model))
    out = model.predictor(c[None], k)[0]
    model.train(was)
    return out.numpy()


def save_checkpoint(model: DeclNetwork, path, step: int = 0, seed: int = 0, extra=None) -> Path:
    """Write ``model.json`` plus ``weights.bin`` (little-endian float32 tensors)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {}
    offset = 0
    chunks = []
    for name, tensor in model.state_dict().items():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    (path / "weights.bin").write_bytes(b"".join(chunks))
    meta = {"config": model.cfg.to_dict(), "step": int(step), "seed": int(seed), "tensors": index}
    if extra:
        meta.update(extra)
    (path / "model.json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_checkpoint(path):
    """Return ``(model, meta)`` for a checkpoint directory."""
    path = Path(path)
    meta = json.loads((path / "model.json").read_text())
    model = DeclNetwork(ModelConfig(**meta["config"]))
    blob = (path / "weights.bin").read_bytes()
    state = model.state_dict()
    for name, info in meta["tensors"].items():
        if name not in state:
            raise KeyError(f"checkpoint tensor {name!r} has no home in the model")
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=info["offset"]).reshape(info["shape"])
        state[name] = torch.from_numpy(arr.copy()).to(state[name].dtype)
    model.load_state_dict(state)
    model.eval()
    return model, meta


def parameter_digest(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
