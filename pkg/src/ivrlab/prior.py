"""The frozen generative prior: noise schedule, score network, samplers.

Schedule: rectified-flow style (alpha, sigma) = (1 - u', u') where u' is the
shifted time u' = shift*u / (1 + (shift-1)*u), u = t/n_steps. The shift knob
concentrates steps at high noise; shift=1 is the identity.

The score network predicts the noise eps_hat; the score is -eps_hat/sigma_t.
With lambda(t) = sigma_t^2 the denoising score-matching objective reduces to
plain noise-prediction MSE, which is what the trainer minimizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import CodecParams, LatentBlocks
from .degrade import Measurement, data_fidelity_t
from .errors import ConfigError, ShapeError, TrainingDivergence
from .nn import (AdamW, LayerNorm, Linear, Mlp, apply_rotary, rotary_tables,
                 sdpa, timestep_features)
from .synthvideo import VideoClip


@dataclass
class NoiseSchedule:
    n_steps: int
    alpha: np.ndarray     # alpha[t], t = 0..n_steps
    sigma: np.ndarray
    weight: np.ndarray    # w(t) for the prior matching loss
    shift: float


def make_schedule(n_steps: int, shift: float = 8.0) -> NoiseSchedule:
    if n_steps < 2:
        raise ConfigError(f"n_steps must be >= 2, got {n_steps}")
    if shift < 1.0:
        raise ConfigError(f"shift must be >= 1, got {shift}")
    u = np.arange(n_steps + 1, dtype=np.float64) / n_steps
    u_shift = shift * u / (1.0 + (shift - 1.0) * u)
    sched = NoiseSchedule(n_steps=n_steps, alpha=1.0 - u_shift, sigma=u_shift,
                          weight=np.ones(n_steps + 1), shift=shift)
    assert sched.alpha[0] == 1.0 and sched.sigma[0] == 0.0
    assert abs(sched.alpha[-1]) < 1e-12 and abs(sched.sigma[-1] - 1.0) < 1e-12
    return sched


def _check_t(schedule: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if t.min() < 0 or t.max() > schedule.n_steps:
        raise ConfigError(f"timestep {t} outside [0, {schedule.n_steps}]")
    return t


def add_noise(z0: np.ndarray, t, eps: np.ndarray,
              schedule: NoiseSchedule) -> np.ndarray:
    """z_t = alpha_t z0 + sigma_t eps; `t` may be scalar or per-sample [B]."""
    if eps.shape != z0.shape:
        raise ShapeError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    t = _check_t(schedule, t)
    if t.ndim == 0:
        return schedule.alpha[t] * z0 + schedule.sigma[t] * eps
    bshape = (len(t),) + (1,) * (z0.ndim - 1)
    return (schedule.alpha[t].reshape(bshape) * z0
            + schedule.sigma[t].reshape(bshape) * eps)


def add_noise_t(z0: Tensor, t, eps: np.ndarray, schedule: NoiseSchedule) -> Tensor:
    t = _check_t(schedule, t)
    if t.ndim == 0:
        return z0 * float(schedule.alpha[t]) + Tensor(schedule.sigma[t] * eps)
    bshape = (len(t),) + (1,) * (z0.ndim - 1)
    return (z0 * Tensor(schedule.alpha[t].reshape(bshape))
            + Tensor(schedule.sigma[t].reshape(bshape) * eps))


class ScoreNet:
    """Bidirectional transformer over latent frames with noise-level AdaLN.

    Tokens are whole latent frames ([T, h, w, c] -> T tokens of dim h*w*c);
    rotary positions index frames. Output head is zero-initialized.
    """

    def __init__(self, latent_shape: tuple, schedule: NoiseSchedule,
                 width: int = 96, n_layers: int = 2, n_heads: int = 4,
                 seed: int = 0):
        self.latent_shape = tuple(latent_shape)       # (T, h, w, c)
        self.schedule = schedule
        self.width = width
        self.n_layers = n_layers
        self.n_heads = n_heads
        if width % n_heads:
            raise ConfigError("width must be divisible by n_heads")
        self.dk = width // n_heads
        if self.dk % 2:
            raise ConfigError("head dim must be even for rotary positions")
        T = self.latent_shape[0]
        self.feat = int(np.prod(self.latent_shape[1:]))
        rng = np.random.default_rng(np.random.PCG64(seed))
        self.in_proj = Linear(rng, self.feat, width, "score.in")
        self.t_mlp1 = Linear(rng, width, width, "score.t1")
        self.t_mlp2 = Linear(rng, width, width, "score.t2")
        self.layers = []
        for i in range(n_layers):
            self.layers.append({
                "ln1": LayerNorm(width, f"score.{i}.ln1"),
                "qkv": Linear(rng, width, 3 * width, f"score.{i}.qkv"),
                "proj": Linear(rng, width, width, f"score.{i}.proj"),
                "ln2": LayerNorm(width, f"score.{i}.ln2"),
                "mlp": Mlp(rng, width, 2 * width, f"score.{i}.mlp"),
                "ada": Linear(rng, width, 4 * width, f"score.{i}.ada", zero_init=True),
            })
        self.ln_f = LayerNorm(width, "score.lnf")
        self.out_proj = Linear(rng, width, self.feat, "score.out", zero_init=True)
        self.rot_cos, self.rot_sin = rotary_tables(np.arange(T, dtype=np.float64), self.dk)

    def parameters(self):
        out = self.in_proj.parameters() + self.t_mlp1.parameters() + self.t_mlp2.parameters()
        for lay in self.layers:
            for key in ("ln1", "qkv", "proj", "ln2", "mlp", "ada"):
                out += lay[key].parameters()
        return out + self.ln_f.parameters() + self.out_proj.parameters()

    def param_dict(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_param_dict(self, state):
        for p in self.parameters():
            p.data = np.asarray(state[p.name], dtype=np.float64).copy()

    def arch(self) -> dict:
        return {"kind": "score_net", "latent_shape": list(self.latent_shape),
                "width": self.width, "n_layers": self.n_layers,
                "n_heads": self.n_heads, "n_steps": self.schedule.n_steps,
                "shift": self.schedule.shift}

    def _attend(self, x: Tensor, lay) -> Tensor:
        B, S, W = x.shape
        h, dk = self.n_heads, self.dk
        qkv = lay["qkv"](x)
        q = qkv[:, :, :W].reshape(B, S, h, dk).transpose(0, 2, 1, 3)
        k = qkv[:, :, W:2 * W].reshape(B, S, h, dk).transpose(0, 2, 1, 3)
        v = qkv[:, :, 2 * W:].reshape(B, S, h, dk).transpose(0, 2, 1, 3)
        q = apply_rotary(q, self.rot_cos[:S], self.rot_sin[:S])
        k = apply_rotary(k, self.rot_cos[:S], self.rot_sin[:S])
        out = sdpa(q, k, v)
        return lay["proj"](out.transpose(0, 2, 1, 3).reshape(B, S, W))

    def predict_eps(self, z: Tensor | np.ndarray, t) -> Tensor:
        """Noise prediction for z [B, T, h, w, c] at per-sample steps t [B]."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.shape[1:] != self.latent_shape:
            raise ShapeError(f"latent shape {z.shape[1:]} != {self.latent_shape}")
        B, T = z.shape[0], z.shape[1]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
        _check_t(self.schedule, t)
        u = self.schedule.sigma[t]
        temb = Tensor(timestep_features(u, self.width))
        temb = self.t_mlp2(self.t_mlp1(temb).gelu())
        x = self.in_proj(z.reshape(B, T, self.feat))
        for lay in self.layers:
            mod = lay["ada"](temb).reshape(B, 1, 4 * self.width)
            W = self.width
            sh1, sc1 = mod[:, :, :W], mod[:, :, W:2 * W]
            sh2, sc2 = mod[:, :, 2 * W:3 * W], mod[:, :, 3 * W:]
            x = x + self._attend(lay["ln1"](x) * (sc1 + 1.0) + sh1, lay)
            x = x + lay["mlp"](lay["ln2"](x) * (sc2 + 1.0) + sh2)
        out = self.out_proj(self.ln_f(x))
        return out.reshape((B,) + self.latent_shape)

    def score_t(self, z: Tensor, t) -> Tensor:
        """Score of the noised marginal, -eps_hat / sigma_t (sigma_t > 0)."""
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (z.shape[0],))
        sig = self.schedule.sigma[t]
        if np.any(sig <= 0):
            raise ConfigError("score undefined at sigma_t = 0")
        inv = (-1.0 / sig).reshape((len(t),) + (1,) * (z.ndim - 1))
        return self.predict_eps(z, t) * Tensor(inv)

    def score_np(self, z: np.ndarray, t) -> np.ndarray:
        with ad.no_grad():
            return self.score_t(Tensor(z), t).data


@dataclass
class DsmTrainConfig:
    steps: int = 3000
    lr: float = 1e-3
    batch: int = 8
    grad_clip: float = 1.0
    seed: int = 0
    width: int = 96
    n_layers: int = 2
    n_heads: int = 4
    log_every: int = 100
    # "index" draws t uniformly; "sigma" draws sigma_t uniformly, which spends
    # more samples where the shifted schedule changes fastest (low t).
    t_sampling: str = "sigma"


def sample_timesteps(rng: np.random.Generator, schedule: NoiseSchedule,
                     size: int, mode: str = "sigma",
                     lo_frac: float = 0.0, hi_frac: float = 1.0) -> np.ndarray:
    """Random training timesteps in [max(1, lo), min(n-1, hi)].

    The per-t regression target is unchanged by the sampling law; only the
    relative accuracy across noise levels shifts.
    """
    n = schedule.n_steps
    lo = max(1, int(np.ceil(lo_frac * n)))
    hi = min(n - 1, int(np.floor(hi_frac * n)))
    if mode == "index":
        return rng.integers(lo, hi + 1, size=size)
    if mode != "sigma":
        raise ConfigError(f"unknown t sampling mode {mode!r}")
    s = rng.uniform(schedule.sigma[lo], schedule.sigma[hi], size=size)
    u = s / (schedule.shift - (schedule.shift - 1.0) * s)
    return np.clip(np.round(u * n).astype(np.int64), lo, hi)


def train_teacher_dsm(latents: np.ndarray, schedule: NoiseSchedule,
                      config: DsmTrainConfig) -> tuple[ScoreNet, list[dict]]:
    """Denoising score matching on teacher-space latents [N, T, h, w, c].

    Minimizes E[ sigma_t^2 || s(z_t,t) + eps/sigma_t ||^2 ], i.e. plain MSE to
    the noise in eps-prediction form.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 5:
        raise ShapeError(f"latents must be [N,T,h,w,c], got {latents.shape}")
    net = ScoreNet(latents.shape[1:], schedule, width=config.width,
                   n_layers=config.n_layers, n_heads=config.n_heads,
                   seed=config.seed)
    rng = np.random.default_rng(np.random.PCG64(config.seed + 1))
    opt = AdamW(net.parameters(), lr=config.lr, clip_norm=config.grad_clip)
    history = []
    n = latents.shape[0]
    for step in range(config.steps):
        batch_seed = config.seed * 1_000_003 + step
        idx = rng.integers(0, n, size=config.batch)
        z0 = latents[idx]
        t = sample_timesteps(rng, schedule, config.batch, config.t_sampling)
        eps = rng.normal(size=z0.shape)
        zt = add_noise(z0, t, eps, schedule)
        pred = net.predict_eps(Tensor(zt), t)
        diff = pred - Tensor(eps)
        loss = (diff * diff).mean()
        if not np.isfinite(loss.data):
            raise TrainingDivergence(
                f"DSM loss non-finite at step {step} (batch seed {batch_seed})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            history.append({"step": step, "loss": float(loss.data)})
    return net, history


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sampling_grid(schedule: NoiseSchedule, steps: int,
                  alpha_floor: float = 0.02) -> np.ndarray:
    """Decreasing timestep grid for reverse integration.

    Starts at the largest t with alpha_t >= alpha_floor: at t = n_steps the
    mix carries no signal (alpha exactly 0) so the reconstruction direction is
    undefined; starting slightly below introduces a small, documented schedule
    bias instead of a division blow-up.
    """
    if steps < 2:
        raise ConfigError(f"need at least 2 steps, got {steps}")
    usable = np.nonzero(schedule.alpha >= alpha_floor)[0]
    t_start = int(usable.max())
    grid = np.unique(np.round(np.linspace(0, t_start, steps + 1)).astype(int))
    return grid[::-1]


def _reverse_ddim(schedule: NoiseSchedule, score_net, steps: int,
                  z_init: np.ndarray, guidance=None) -> tuple[np.ndarray, list]:
    """Deterministic reverse integration from noise; optional per-step guidance.

    `guidance(z0_hat, t) -> (correction, info)` is subtracted from the next
    state (data-consistency steering).
    """
    grid = sampling_grid(schedule, steps)
    z = z_init
    log = []
    for i in range(len(grid) - 1):
        t, s = int(grid[i]), int(grid[i + 1])
        a_t, s_t = schedule.alpha[t], schedule.sigma[t]
        a_s, s_s = schedule.alpha[s], schedule.sigma[s]
        with ad.no_grad():
            eps_hat = score_net.predict_eps(Tensor(z[None]), np.array([t])).data[0]
        z0_hat = (z - s_t * eps_hat) / a_t
        z_next = a_s * z0_hat + s_s * eps_hat
        if guidance is not None:
            corr, info = guidance(z0_hat, t)
            z_next = z_next - corr
            log.append(info)
        z = z_next
    return z, log


def sample_prior(schedule: NoiseSchedule, s_theta, n_steps_used: int,
                 seed: int, block_length: int = 3) -> LatentBlocks:
    """Draw one latent sample by seeded deterministic reverse integration."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    z_init = rng.normal(size=s_theta.latent_shape)
    z, _ = _reverse_ddim(schedule, s_theta, n_steps_used, z_init)
    if not np.all(np.isfinite(z)):
        raise TrainingDivergence("prior sample is non-finite")
    return LatentBlocks.from_full(z, block_length, "teacher")


def posterior_sample_dps(m: Measurement, schedule: NoiseSchedule, s_theta,
                         codec: CodecParams, steps: int, guidance_weight: float,
                         seed: int) -> tuple[VideoClip, list[dict]]:
    """Iterative posterior sampling: reverse diffusion with a data-fidelity
    gradient (through the decoder) subtracted at every step. The slow baseline."""
    if steps < 2:
        raise ConfigError(f"DPS needs steps >= 2, got {steps}")
    rng = np.random.default_rng(np.random.PCG64(seed))
    z_init = rng.normal(size=s_theta.latent_shape)
    y_norm = float(np.sum(m.data ** 2))

    def guidance(z0_hat, t):
        if guidance_weight == 0.0:
            return np.zeros_like(z0_hat), {"t": t, "residual": None}
        zt = Tensor(z0_hat, requires_grad=True)
        x_hat = codec.decode_frames_t(zt)
        loss = data_fidelity_t(x_hat, m)
        loss.backward()
        rel = loss.item() / max(y_norm, 1e-12)
        return guidance_weight * zt.grad, {"t": t, "residual": rel}

    z, log = _reverse_ddim(schedule, s_theta, steps, z_init, guidance)
    with ad.no_grad():
        frames = codec.decode_frames_t(Tensor(z)).data
    clip = VideoClip(frames=np.clip(frames, 0.0, 1.0))
    return clip, log
