"""Forward measurement operators, their exact adjoints, and data fidelity.

Operators act on pixel-space clips [T, H, W, C]:

    inpaint        y = mask * x                       (mask binary, seeded)
    gaussian_blur  y = K * pad_reflect(x)             (per frame, normalized K)
    downsample     y = decimate_f(K_aa * pad_reflect(x))
    identity       y = x

Gaussian noise of std ``noise_sigma`` is added last. ``apply_adjoint`` is the
exact linear adjoint of the noiseless forward map, including the adjoint of
the reflect padding, so <Ax, u> == <x, A^T u> to float precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .synthvideo import VideoClip

KINDS = ("inpaint", "gaussian_blur", "downsample", "identity")

# Reference likelihood weights per task, applied by the distillation loop.
LIKELIHOOD_WEIGHTS = {"inpaint": 0.1, "gaussian_blur": 1.0, "downsample": 0.3,
                      "identity": 1.0}


@dataclass
class OperatorSpec:
    kind: str = "identity"
    mask_ratio: float = 0.5        # inpaint: fraction of pixels removed
    per_frame_mask: bool = False   # inpaint: fresh mask per frame
    kernel_size: int = 9           # blur: odd
    sigma: float = 1.2             # blur: pixels
    factor: int = 2                # downsample: >= 2, divides H and W
    noise_sigma: float = 0.0       # measurement noise std, pixel units
    mask_seed: int = 0
    noise_seed: int = 0

    def validate(self) -> "OperatorSpec":
        if self.kind not in KINDS:
            raise ConfigError(f"unknown operator kind {self.kind!r}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must be in [0,1], got {self.mask_ratio}")
        if self.kernel_size % 2 != 1 or self.kernel_size < 1:
            raise ConfigError(f"kernel_size must be odd positive, got {self.kernel_size}")
        if self.factor < 2:
            raise ConfigError(f"downsample factor must be >= 2, got {self.factor}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        return self


@dataclass
class Measurement:
    data: np.ndarray               # shape set by the operator
    operator: OperatorSpec
    source_shape: tuple            # clean-domain [T, H, W, C]
    mask: Optional[np.ndarray] = field(default=None)  # inpaint only


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian; entries sum to 1, symmetric under flips."""
    if size % 2 != 1:
        raise ConfigError(f"kernel size must be odd, got {size}")
    r = size // 2
    ii, jj = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    k = np.exp(-(ii ** 2 + jj ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def make_mask(op: OperatorSpec, H: int, W: int,
              T: int | None = None) -> np.ndarray:
    """Binary observation mask (1 = observed), exact count, seed-reproducible.

    Returns [H, W] for the shared mask, or [T, H, W] when per_frame_mask.
    """
    n = H * W
    n_masked = int(round(op.mask_ratio * n))

    def one(seed_parts):
        rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence(seed_parts)))
        m = np.ones(n, dtype=np.float64)
        m[rng.permutation(n)[:n_masked]] = 0.0
        return m.reshape(H, W)

    if op.per_frame_mask:
        if T is None:
            raise ConfigError("per-frame masks need the frame count")
        return np.stack([one([op.mask_seed, t]) for t in range(T)])
    return one([op.mask_seed])


def _reflect_index(n: int, pad: int) -> np.ndarray:
    """Source index for each padded position, np.pad 'reflect' convention."""
    idx = np.arange(-pad, n + pad)
    idx = np.abs(idx)
    idx = np.where(idx >= n, 2 * (n - 1) - idx, idx)
    return idx


def _blur_forward(frames: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    k = kernel.shape[0]
    pad = k // 2
    xp = np.pad(frames, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return np.einsum("thwcij,ij->thwc", win, kernel)


def _blur_adjoint(u: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Exact adjoint of `_blur_forward` (correlation transpose + pad adjoint)."""
    T, H, W, C = u.shape
    k = kernel.shape[0]
    pad = k // 2
    gxp = np.zeros((T, H + 2 * pad, W + 2 * pad, C), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            gxp[:, di:di + H, dj:dj + W, :] += u * kernel[di, dj]
    ih = _reflect_index(H, pad)
    iw = _reflect_index(W, pad)
    out = np.zeros((H, W, T * C), dtype=np.float64)
    vals = gxp.transpose(1, 2, 0, 3).reshape(H + 2 * pad, W + 2 * pad, T * C)
    np.add.at(out,
              (ih[:, None].repeat(W + 2 * pad, 1).ravel(),
               np.broadcast_to(iw, (H + 2 * pad, W + 2 * pad)).ravel()),
              vals.reshape(-1, T * C))
    return out.reshape(H, W, T, C).transpose(2, 0, 1, 3)


def _aa_kernel(op: OperatorSpec) -> np.ndarray:
    # Anti-alias prefilter for stride-`factor` decimation.
    return gaussian_kernel(2 * op.factor + 1, 0.5 * op.factor)


def _frames_of(x) -> np.ndarray:
    return x.frames if isinstance(x, VideoClip) else np.asarray(x, dtype=np.float64)


def forward_noiseless(frames: np.ndarray, op: OperatorSpec) -> np.ndarray:
    """The linear map A without measurement noise."""
    T, H, W, C = frames.shape
    if op.kind == "identity":
        return frames.copy()
    if op.kind == "inpaint":
        mask = make_mask(op, H, W, T)
        m = mask[:, :, :, None] if op.per_frame_mask else mask[None, :, :, None]
        return frames * m
    if op.kind == "gaussian_blur":
        return _blur_forward(frames, gaussian_kernel(op.kernel_size, op.sigma))
    if op.kind == "downsample":
        if H % op.factor or W % op.factor:
            raise ConfigError(f"factor {op.factor} does not divide {H}x{W}")
        smooth = _blur_forward(frames, _aa_kernel(op))
        return smooth[:, ::op.factor, ::op.factor, :].copy()
    raise ConfigError(f"unknown operator kind {op.kind!r}")


def apply_forward(x, op: OperatorSpec,
                  noise_rng: np.random.Generator | None = None) -> Measurement:
    """y = A(x) + n. Deterministic for a given spec (noise seeded) unless a
    caller-supplied noise generator is passed."""
    op.validate()
    frames = _frames_of(x)
    if frames.ndim != 4:
        raise ShapeError(f"expected [T,H,W,C], got {frames.shape}")
    data = forward_noiseless(frames, op)
    if op.noise_sigma > 0:
        rng = noise_rng or np.random.default_rng(np.random.PCG64(op.noise_seed))
        data = data + rng.normal(0.0, op.noise_sigma, size=data.shape)
    mask = None
    if op.kind == "inpaint":
        mask = make_mask(op, frames.shape[1], frames.shape[2], frames.shape[0])
        if op.noise_sigma > 0:
            # unobserved entries stay exactly zero
            m = mask[:, :, :, None] if op.per_frame_mask else mask[None, :, :, None]
            data = data * m
    return Measurement(data=data, operator=op, source_shape=frames.shape, mask=mask)


def apply_adjoint(m_data: np.ndarray, op: OperatorSpec) -> np.ndarray:
    """Exact adjoint of the noiseless forward map; returns clean-domain shape."""
    op.validate()
    m_data = np.asarray(m_data, dtype=np.float64)
    if m_data.ndim != 4:
        raise ShapeError(f"expected [T,h,w,C], got {m_data.shape}")
    T, h, w, C = m_data.shape
    if op.kind == "identity":
        return m_data.copy()
    if op.kind == "inpaint":
        mask = make_mask(op, h, w, T)
        m = mask[:, :, :, None] if op.per_frame_mask else mask[None, :, :, None]
        return m_data * m
    if op.kind == "gaussian_blur":
        return _blur_adjoint(m_data, gaussian_kernel(op.kernel_size, op.sigma))
    if op.kind == "downsample":
        up = np.zeros((T, h * op.factor, w * op.factor, C), dtype=np.float64)
        up[:, ::op.factor, ::op.factor, :] = m_data
        return _blur_adjoint(up, _aa_kernel(op))
    raise ConfigError(f"unknown operator kind {op.kind!r}")


def data_fidelity_loss(x_hat, m: Measurement) -> tuple[float, np.ndarray]:
    """Squared-L2 residual ||y - A(x_hat)||^2 and its gradient 2 A^T(A x_hat - y)."""
    frames = _frames_of(x_hat)
    if frames.shape != tuple(m.source_shape):
        raise ShapeError(f"x_hat shape {frames.shape} != source {m.source_shape}")
    r = forward_noiseless(frames, m.operator) - m.data
    return float(np.sum(r * r)), 2.0 * apply_adjoint(r, m.operator)


def data_fidelity_t(x_hat: Tensor, m: Measurement) -> Tensor:
    """Autodiff node for the data-fidelity loss; backward uses the exact adjoint."""
    if x_hat.shape != tuple(m.source_shape):
        raise ShapeError(f"x_hat shape {x_hat.shape} != source {m.source_shape}")
    r = forward_noiseless(x_hat.data, m.operator) - m.data
    loss = float(np.sum(r * r))
    grad = 2.0 * apply_adjoint(r, m.operator)

    def bw(g):
        x_hat._accum(g * grad)

    return Tensor(loss, parents=(x_hat,), bw=bw)


def bilinear_upsample(frames: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear x`factor` upsampling (half-pixel aligned), used to bring a
    low-resolution measurement back to source resolution before encoding."""
    T, h, w, C = frames.shape

    def axis_matrix(n_in: int) -> np.ndarray:
        n_out = n_in * factor
        src = (np.arange(n_out) + 0.5) / factor - 0.5
        i0 = np.clip(np.floor(src).astype(int), 0, n_in - 1)
        i1 = np.clip(i0 + 1, 0, n_in - 1)
        frac = np.clip(src - np.floor(src), 0.0, 1.0)
        mat = np.zeros((n_out, n_in), dtype=np.float64)
        mat[np.arange(n_out), i0] += 1.0 - frac
        mat[np.arange(n_out), i1] += frac
        return mat

    Uh = axis_matrix(h)
    Uw = axis_matrix(w)
    return np.einsum("Hh,thwc,Ww->tHWc", Uh, frames, Uw)


def solver_input_frames(m: Measurement) -> np.ndarray:
    """Frames fed to the solver's encoder: the measurement, upsampled to the
    source resolution for downsampling operators."""
    if m.operator.kind == "downsample":
        return bilinear_upsample(m.data, m.operator.factor)
    return m.data


def latent_footprint_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Per-latent-cell indicator: 1 where the cell's stride x stride pixel
    footprint contains at least one unobserved pixel.

    Accepts [H, W] or [T, H, W]; returns [H/s, W/s] or [T, H/s, W/s].
    """
    squeeze = mask.ndim == 2
    m = mask[None] if squeeze else mask
    T, H, W = m.shape
    if H % stride or W % stride:
        raise ShapeError(f"stride {stride} does not divide {H}x{W}")
    tiles = m.reshape(T, H // stride, stride, W // stride, stride)
    out = 1.0 - tiles.min(axis=(2, 4))
    return out[0] if squeeze else out
