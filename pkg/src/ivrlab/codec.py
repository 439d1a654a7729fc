"""Frame autoencoders defining the two latent spaces, plus the Haar front-end.

Two codecs share one sequential executor:

  * ``teacher``: strided conv encoder / conv decoder, spatial stride 4.
  * ``compact``: Haar wavelet channel packing first (HxWxC -> H/2 x W/2 x 4C),
    then smaller convs; the decoder emits wavelet coefficients and inverts the
    packing. Its decode FLOPs must stay under 1/4 of the teacher's.

Latents are deterministic (encoder mean, no sampling) and globally rescaled to
roughly unit variance after training so diffusion noise mixes at a sane scale.
Temporal stride is 1: frames are encoded independently, so any temporal block
is encoded causally by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, concat, conv2d, upsample2
from .errors import ConfigError, ShapeError, SpaceMismatchError, TrainingDivergence
from .nn import AdamW
from .synthvideo import VideoClip

SPACE_TAGS = ("teacher", "compact")


@dataclass
class LatentBlocks:
    """Ordered per-block latents [T_blk, h, w, c] in one latent space."""
    blocks: list
    space_tag: str
    block_length: int

    def __post_init__(self):
        if self.space_tag not in SPACE_TAGS:
            raise SpaceMismatchError(f"unknown space tag {self.space_tag!r}")
        shapes = {b.shape for b in self.blocks}
        if len(shapes) > 1:
            raise ShapeError(f"blocks have inconsistent shapes: {shapes}")
        for b in self.blocks:
            if not np.all(np.isfinite(b)):
                raise ShapeError("latent block contains non-finite values")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def full(self) -> np.ndarray:
        return np.concatenate(self.blocks, axis=0)

    @classmethod
    def from_full(cls, arr: np.ndarray, block_length: int, space_tag: str) -> "LatentBlocks":
        if arr.shape[0] % block_length:
            raise ShapeError(
                f"{arr.shape[0]} latent frames not divisible by block length {block_length}")
        blocks = [arr[i:i + block_length].copy()
                  for i in range(0, arr.shape[0], block_length)]
        return cls(blocks=blocks, space_tag=space_tag, block_length=block_length)


# ---------------------------------------------------------------------------
# Haar wavelet channel packing
# ---------------------------------------------------------------------------

def wavelet_pack(x) -> np.ndarray:
    """Single-level orthonormal 2-D Haar per frame: [T,H,W,C] -> [T,H/2,W/2,4C]."""
    frames = x.frames if isinstance(x, VideoClip) else np.asarray(x, dtype=np.float64)
    T, H, W, C = frames.shape
    if H % 2 or W % 2:
        raise ShapeError(f"H and W must be even for the Haar transform, got {H}x{W}")
    a = frames[:, 0::2, 0::2]
    b = frames[:, 0::2, 1::2]
    c = frames[:, 1::2, 0::2]
    d = frames[:, 1::2, 1::2]
    return np.concatenate([(a + b + c + d) / 2.0, (a - b + c - d) / 2.0,
                           (a + b - c - d) / 2.0, (a - b - c + d) / 2.0], axis=-1)


def wavelet_unpack(z: np.ndarray) -> np.ndarray:
    """Exact inverse of `wavelet_pack`."""
    T, h, w, c4 = z.shape
    if c4 % 4:
        raise ShapeError(f"channel count {c4} not a multiple of 4")
    C = c4 // 4
    ll, lh, hl, hh = (z[..., i * C:(i + 1) * C] for i in range(4))
    a = (ll + lh + hl + hh) / 2.0
    b = (ll - lh + hl - hh) / 2.0
    c = (ll + lh - hl - hh) / 2.0
    d = (ll - lh - hl + hh) / 2.0
    out = np.empty((T, 2 * h, 2 * w, C), dtype=np.float64)
    out[:, 0::2, 0::2] = a
    out[:, 0::2, 1::2] = b
    out[:, 1::2, 0::2] = c
    out[:, 1::2, 1::2] = d
    return out


def _pack_t(x: Tensor) -> Tensor:
    a = x[:, 0::2, 0::2]
    b = x[:, 0::2, 1::2]
    c = x[:, 1::2, 0::2]
    d = x[:, 1::2, 1::2]
    return concat([(a + b + c + d) * 0.5, (a - b + c - d) * 0.5,
                   (a + b - c - d) * 0.5, (a - b - c + d) * 0.5], axis=-1)


def _unpack_t(z: Tensor) -> Tensor:
    n, h, w, c4 = z.shape
    C = c4 // 4
    ll, lh, hl, hh = (z[..., i * C:(i + 1) * C] for i in range(4))
    a = (ll + lh + hl + hh) * 0.5
    b = (ll - lh + hl - hh) * 0.5
    c = (ll + lh - hl - hh) * 0.5
    d = (ll - lh - hl + hh) * 0.5

    def cell(t):
        return t.reshape(n, h, 1, w, 1, C)

    top = concat([cell(a), cell(b)], axis=4)
    bot = concat([cell(c), cell(d)], axis=4)
    return concat([top, bot], axis=2).reshape(n, 2 * h, 2 * w, C)


# ---------------------------------------------------------------------------
# Codec networks
# ---------------------------------------------------------------------------

_CONV = "conv"


def _teacher_layers(C: int, c_lat: int):
    enc = [(_CONV, C, 32, 3, 2, 1, "gelu"),
           (_CONV, 32, 64, 3, 2, 1, "gelu"),
           (_CONV, 64, c_lat, 1, 1, 0, None)]
    dec = [(_CONV, c_lat, 48, 1, 1, 0, "gelu"),
           ("up2",),
           (_CONV, 48, 24, 3, 1, 1, "gelu"),
           ("up2",),
           (_CONV, 24, 12, 3, 1, 1, "gelu"),
           (_CONV, 12, C, 3, 1, 1, None),
           ("sigmoid",)]
    return enc, dec


def _compact_layers(C: int, c_lat: int):
    enc = [("pack",),
           (_CONV, 4 * C, 24, 3, 1, 1, "gelu"),
           (_CONV, 24, 24, 3, 2, 1, "gelu"),
           (_CONV, 24, c_lat, 1, 1, 0, None)]
    dec = [(_CONV, c_lat, 24, 1, 1, 0, "gelu"),
           ("up2",),
           (_CONV, 24, 16, 3, 1, 1, "gelu"),
           (_CONV, 16, 4 * C, 3, 1, 1, None),
           ("unpack",),
           ("sigmoid",)]
    return enc, dec


class CodecParams:
    """Trained encoder/decoder pair for one latent space."""

    def __init__(self, codec_id: str, frame_shape: tuple, latent_channels: int = 6,
                 seed: int = 0):
        if codec_id not in SPACE_TAGS:
            raise ConfigError(f"codec_id must be one of {SPACE_TAGS}, got {codec_id!r}")
        self.codec_id = codec_id
        self.frame_shape = tuple(frame_shape)          # (H, W, C)
        self.latent_channels = latent_channels
        self.spatial_stride = 4
        self.temporal_stride = 1
        self.latent_scale = 1.0
        H, W, C = self.frame_shape
        if H % self.spatial_stride or W % self.spatial_stride:
            raise ConfigError(f"frame {H}x{W} not divisible by stride {self.spatial_stride}")
        make = _teacher_layers if codec_id == "teacher" else _compact_layers
        self._enc_spec, self._dec_spec = make(C, latent_channels)
        rng = np.random.default_rng(np.random.PCG64(seed))
        self._enc = self._build(self._enc_spec, rng, f"{codec_id}.enc")
        self._dec = self._build(self._dec_spec, rng, f"{codec_id}.dec")

    @staticmethod
    def _build(spec, rng, prefix):
        layers = []
        for i, layer in enumerate(spec):
            if layer[0] == _CONV:
                _, cin, cout, k, stride, pad, act = layer
                w = Parameter(rng.normal(0.0, 1.0 / np.sqrt(k * k * cin),
                                         size=(k, k, cin, cout)), f"{prefix}.{i}.w")
                b = Parameter(np.zeros(cout), f"{prefix}.{i}.b")
                layers.append(("conv", w, b, stride, pad, act))
            else:
                layers.append((layer[0],))
        return layers

    @staticmethod
    def _run(layers, x: Tensor) -> Tensor:
        for layer in layers:
            kind = layer[0]
            if kind == "conv":
                _, w, b, stride, pad, act = layer
                x = conv2d(x, w, b, stride=stride, pad=pad)
                if act == "gelu":
                    x = x.gelu()
            elif kind == "up2":
                x = upsample2(x)
            elif kind == "pack":
                x = _pack_t(x)
            elif kind == "unpack":
                x = _unpack_t(x)
            elif kind == "sigmoid":
                x = x.sigmoid()
        return x

    # frames/latents below are [N, H, W, C] / [N, h, w, c] Tensors
    def encode_frames_t(self, frames: Tensor) -> Tensor:
        if frames.shape[1:] != self.frame_shape:
            raise ShapeError(f"frames {frames.shape[1:]} != codec frame {self.frame_shape}")
        return self._run(self._enc, frames) * self.latent_scale

    def decode_frames_t(self, z: Tensor) -> Tensor:
        return self._run(self._dec, z * (1.0 / self.latent_scale))

    @property
    def latent_hw(self) -> tuple:
        H, W, _ = self.frame_shape
        return H // self.spatial_stride, W // self.spatial_stride

    def parameters(self):
        out = []
        for layers in (self._enc, self._dec):
            for layer in layers:
                if layer[0] == "conv":
                    out += [layer[1], layer[2]]
        return out

    def param_dict(self):
        d = {p.name: p.data.copy() for p in self.parameters()}
        d["_latent_scale"] = np.array([self.latent_scale])
        return d

    def load_param_dict(self, state):
        for p in self.parameters():
            p.data = np.asarray(state[p.name], dtype=np.float64).copy()
        self.latent_scale = float(state["_latent_scale"][0])

    def arch(self) -> dict:
        return {"codec_id": self.codec_id, "frame_shape": list(self.frame_shape),
                "latent_channels": self.latent_channels,
                "spatial_stride": self.spatial_stride,
                "temporal_stride": self.temporal_stride}

    def _flops(self, spec) -> int:
        H, W, C = self.frame_shape
        # walk spatial dims through the layer sequence (conv MACs x2 only)
        if spec is self._dec_spec:
            h, w = self.latent_hw
        else:
            h, w = H, W
        total = 0
        for layer in spec:
            if layer[0] == _CONV:
                _, cin, cout, k, stride, pad, _ = layer
                h_out = (h + 2 * pad - k) // stride + 1
                w_out = (w + 2 * pad - k) // stride + 1
                total += 2 * k * k * cin * cout * h_out * w_out
                h, w = h_out, w_out
            elif layer[0] == "up2":
                h, w = 2 * h, 2 * w
            elif layer[0] == "pack":
                h, w = h // 2, w // 2
            elif layer[0] == "unpack":
                h, w = 2 * h, 2 * w
        return total

    def decode_flops(self) -> int:
        """Analytic conv FLOPs to decode one frame."""
        return self._flops(self._dec_spec)

    def encode_flops(self) -> int:
        return self._flops(self._enc_spec)


# ---------------------------------------------------------------------------
# Public encode / decode on clips
# ---------------------------------------------------------------------------

def encode(x: VideoClip, codec: CodecParams, block_length: int = 3) -> LatentBlocks:
    """Deterministic latents for a clip, partitioned into temporal blocks."""
    frames = x.frames
    T, H, W, C = frames.shape
    if (H, W, C) != codec.frame_shape:
        raise ShapeError(f"clip {H}x{W}x{C} does not match codec {codec.frame_shape}")
    if T % (block_length * codec.temporal_stride):
        raise ConfigError(f"T={T} not divisible by block length {block_length}")
    with ad.no_grad():
        z = codec.encode_frames_t(Tensor(frames)).data
    return LatentBlocks.from_full(z, block_length, codec.codec_id)


def decode(z: LatentBlocks, codec: CodecParams) -> VideoClip:
    """Decode latents; rejects latents tagged for the other codec."""
    if z.space_tag != codec.codec_id:
        raise SpaceMismatchError(
            f"latents tagged {z.space_tag!r} cannot be decoded by the "
            f"{codec.codec_id!r} codec")
    with ad.no_grad():
        frames = codec.decode_frames_t(Tensor(z.full())).data
    return VideoClip(frames=np.clip(frames, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class CodecTrainConfig:
    steps: int = 1200
    lr: float = 2e-3
    batch_clips: int = 2
    latent_reg: float = 1e-4
    seed: int = 0
    eval_every: int = 200


def train_codec(clips: list[VideoClip], codec_id: str, config: CodecTrainConfig,
                latent_channels: int = 6) -> tuple[CodecParams, list[dict]]:
    """Fit a codec by reconstruction MSE plus a small latent-energy regularizer.

    Returns the trained (frozen-by-convention) params and the loss history.
    """
    if not clips:
        raise ConfigError("empty training set")
    frame_shape = clips[0].frames.shape[1:]
    codec = CodecParams(codec_id, frame_shape, latent_channels, seed=config.seed)
    if codec_id == "compact":
        ref = CodecParams("teacher", frame_shape, latent_channels, seed=0)
        if codec.decode_flops() > ref.decode_flops() / 4:
            raise ConfigError(
                f"compact decode FLOPs {codec.decode_flops()} exceed a quarter of "
                f"the teacher's {ref.decode_flops()}")
    rng = np.random.default_rng(np.random.PCG64(config.seed + 1))
    opt = AdamW(codec.parameters(), lr=config.lr, clip_norm=1.0)
    history = []
    for step in range(config.steps):
        picks = rng.integers(0, len(clips), size=config.batch_clips)
        frames = np.concatenate([clips[i].frames for i in picks], axis=0)
        x = Tensor(frames)
        z = codec._run(codec._enc, x)
        recon = codec._run(codec._dec, z)
        diff = recon - x
        mse = (diff * diff).mean()
        loss = mse + config.latent_reg * (z * z).mean()
        if not np.isfinite(loss.data):
            raise TrainingDivergence(
                f"codec {codec_id} loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.eval_every == 0 or step == config.steps - 1:
            history.append({"step": step, "loss": float(loss.data),
                            "mse": float(mse.data)})
    # rescale latents to unit-ish std for diffusion
    sample = np.concatenate([clips[i].frames for i in
                             rng.integers(0, len(clips), size=min(4, len(clips)))])
    with ad.no_grad():
        z = codec._run(codec._enc, Tensor(sample)).data
    std = float(z.std())
    codec.latent_scale = 1.0 / std if std > 1e-6 else 1.0
    return codec, history


def roundtrip_psnr(codec: CodecParams, clips: list[VideoClip],
                   block_length: int = 3) -> float:
    """Mean reconstruction PSNR of decode(encode(x)) over the given clips."""
    vals = []
    for clip in clips:
        recon = decode(encode(clip, codec, block_length), codec)
        mse = float(np.mean((recon.frames - clip.frames) ** 2))
        vals.append(10.0 * np.log10(1.0 / max(mse, 1e-12)))
    return float(np.mean(vals))
