"""Small neural-network toolkit: layers, attention pieces, AdamW.

All modules expose ``parameters()`` (list of Parameter), ``param_dict()`` /
``load_param_dict()`` for checkpointing, and are plain callables on Tensors.
Shapes follow [batch, tokens, features] for sequence models.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import Parameter, Tensor, concat, softmax


def _init(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.normal(0.0, scale, size=shape)


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, name: str, zero_init: bool = False):
        scale = 0.0 if zero_init else 1.0 / np.sqrt(d_in)
        self.w = Parameter(_init(rng, (d_in, d_out), scale), f"{name}.w")
        self.b = Parameter(np.zeros(d_out), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def parameters(self):
        return [self.w, self.b]


class LayerNorm:
    def __init__(self, dim: int, name: str, eps: float = 1e-6):
        self.g = Parameter(np.ones(dim), f"{name}.g")
        self.b = Parameter(np.zeros(dim), f"{name}.b")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / (var + self.eps).sqrt() * self.g + self.b

    def parameters(self):
        return [self.g, self.b]


class Mlp:
    def __init__(self, rng, dim: int, hidden: int, name: str):
        self.fc1 = Linear(rng, dim, hidden, f"{name}.fc1")
        self.fc2 = Linear(rng, hidden, dim, f"{name}.fc2")

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()


def rotary_tables(positions: np.ndarray, dim: int, base: float = 10000.0):
    """cos/sin tables for rotary position encoding; `dim` must be even."""
    half = dim // 2
    freqs = base ** (-np.arange(half) / half)
    ang = positions[:, None] * freqs[None, :]          # [S, half]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1)
    return cos, sin


def apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs; x is [..., S, dim] with matching tables."""
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    rotated = concat([-x2, x1], axis=-1)
    return x * Tensor(cos) + rotated * Tensor(sin)


def sdpa(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention; q [..., Sq, dk], k/v [..., Sk, dk]."""
    dk = q.shape[-1]
    logits = q @ k.swapaxes(-1, -2) * (1.0 / np.sqrt(dk))
    return softmax(logits, axis=-1) @ v


def timestep_features(u: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of noise level u in [0,1]; shape [B, dim]."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = np.asarray(u, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class AdamW:
    """Adam with decoupled weight decay and global-norm gradient clipping."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float(np.sum(p.grad ** 2))
        return float(np.sqrt(total))

    def step(self) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm and norm > 0:
            scale = self.clip_norm / norm
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / b1t
            vh = self.v[i] / b2t
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = p.data - self.lr * mh / (np.sqrt(vh) + self.eps)
        return norm


def param_dict(params) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in params}


def load_param_dict(params, state: dict[str, np.ndarray]):
    for p in params:
        if p.name not in state:
            raise KeyError(f"missing parameter {p.name!r} in state")
        if state[p.name].shape != p.data.shape:
            raise ValueError(f"shape mismatch for {p.name!r}: "
                             f"{state[p.name].shape} vs {p.data.shape}")
        p.data = np.asarray(state[p.name], dtype=np.float64).copy()


def params_hash(params) -> str:
    """Stable digest of parameter contents, used for freeze checks."""
    h = hashlib.sha256()
    for p in sorted(params, key=lambda p: p.name):
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
