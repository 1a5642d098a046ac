"""Diffusion transformer over latent video tokens.

Blocks run four sub-layers in order, each pre-layer-normed with a residual:
2D spatial self-attention (within one latent frame of one segment), 3D
attention (unmasked across all tokens), cross-attention to text, FFN.  The
velocity head reads only the noisy segment and is zero-initialized, so an
untrained model predicts zero velocity.

Condition injection modes:

  frame      [noisy | cam | cont] segments in one token sequence (the default;
             adds no parameters relative to the unconditional layout)
  channel    conditions stacked onto the noisy latent's channels through
             zero-initialized extra input-projection rows
  temporal   conditions appear only as extra keys/values inside 3D attention
  controlnet conditions run through duplicated blocks; zero-initialized
             per-block bridges add their features to the trunk

Segment roles are marked by three learned segment embeddings; positions by
factorized (frame, row, column) sinusoids; the timestep by a sinusoidal
embedding through a small MLP (conditions get the t=0 embedding).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from . import tensor as T
from .prompts import VOCAB
from .tensor import Parameter, Tensor
from .tokenizer import latent_channels, latent_frames, patchify

__all__ = [
    "InjectionMode",
    "ModelConfig",
    "build_params",
    "param_census",
    "set_finetune_mode",
    "forward",
    "positional_encoding",
    "time_embedding_input",
]


class InjectionMode(Enum):
    FRAME_CONCAT = "frame"
    CHANNEL_CONCAT = "channel"
    TEMPORAL_ONLY = "temporal"
    CONTROLNET = "controlnet"


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    d_model: int = 128
    heads: int = 4
    ffn_mult: int = 4
    patch: int = 3
    ft: int = 4
    s: int = 4
    vocab_size: int = len(VOCAB)
    n_text: int = 12
    frames: int = 17
    height: int = 48
    width: int = 84
    mode: InjectionMode = InjectionMode.FRAME_CONCAT

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must divide evenly into heads")
        if (self.height % self.s) or (self.width % self.s):
            raise ValueError("frame size must be divisible by the spatial factor")
        if (self.height // self.s) % self.patch or (self.width // self.s) % self.patch:
            raise ValueError("latent size must be divisible by the patch size")
        latent_frames(self.frames, self.ft)  # validates the frame count

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def c_latent(self) -> int:
        return latent_channels(self.ft, self.s)

    @property
    def c_noisy(self) -> int:
        # [x_t | first-frame latent | binary mask]
        return 2 * self.c_latent + 1

    @property
    def f_latent(self) -> int:
        return latent_frames(self.frames, self.ft)

    @property
    def grid(self) -> tuple[int, int, int]:
        return (self.f_latent, self.height // self.s // self.patch,
                self.width // self.s // self.patch)

    @property
    def tokens_per_segment(self) -> int:
        fp, hp, wp = self.grid
        return fp * hp * wp


# ---------------------------------------------------------------------------
# parameters

def _normal(rng, shape, std=0.02):
    return rng.normal(0.0, std, size=shape).astype(np.float32)


def _linear(params, rng, name, d_in, d_out, zero=False):
    w = np.zeros((d_in, d_out), np.float32) if zero else _normal(rng, (d_in, d_out))
    params[f"{name}.weight"] = Parameter(f"{name}.weight", w)
    params[f"{name}.bias"] = Parameter(f"{name}.bias", np.zeros(d_out, np.float32))


def _layer_norm_params(params, name, d):
    params[f"{name}.gain"] = Parameter(f"{name}.gain", np.ones(d, np.float32))
    params[f"{name}.bias"] = Parameter(f"{name}.bias", np.zeros(d, np.float32))


def _block_params(params, rng, prefix, d, ffn_mult):
    _layer_norm_params(params, f"{prefix}.ln1", d)
    _linear(params, rng, f"{prefix}.attn2d.qkv", d, 3 * d)
    _linear(params, rng, f"{prefix}.attn2d.proj", d, d)
    _layer_norm_params(params, f"{prefix}.ln2", d)
    _linear(params, rng, f"{prefix}.attn3d.qkv", d, 3 * d)
    _linear(params, rng, f"{prefix}.attn3d.proj", d, d)
    _layer_norm_params(params, f"{prefix}.ln3", d)
    _linear(params, rng, f"{prefix}.xattn.q", d, d)
    _linear(params, rng, f"{prefix}.xattn.kv", d, 2 * d)
    _linear(params, rng, f"{prefix}.xattn.proj", d, d)
    _layer_norm_params(params, f"{prefix}.ln4", d)
    _linear(params, rng, f"{prefix}.ffn.fc1", d, ffn_mult * d)
    _linear(params, rng, f"{prefix}.ffn.fc2", ffn_mult * d, d)


def build_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Parameter]:
    """All modes draw the shared parameters in the same order from the same
    stream, so variants start from an identical base initialization; mode
    extras are appended afterwards (zero-initialized where they must not
    perturb the base behavior)."""
    rng = np.random.default_rng(seed)
    d, p = cfg.d_model, cfg.patch
    params: dict[str, Parameter] = {}
    _linear(params, rng, "input_proj", p * p * cfg.c_noisy, d)
    _linear(params, rng, "t_embed.fc1", d, d)
    _linear(params, rng, "t_embed.fc2", d, d)
    params["segment_embed"] = Parameter("segment_embed", _normal(rng, (3, d)))
    params["text_embed"] = Parameter("text_embed", _normal(rng, (cfg.vocab_size, d)))
    for i in range(cfg.layers):
        _block_params(params, rng, f"blocks.{i}", d, cfg.ffn_mult)
    _layer_norm_params(params, "final_ln", d)
    _linear(params, rng, "out_head", d, p * p * cfg.c_latent, zero=True)

    if cfg.mode is InjectionMode.CHANNEL_CONCAT:
        # widen the input projection with zero rows for the stacked condition
        # channels, interleaved per patch pixel to match the flattened layout
        base = params["input_proj.weight"].value.reshape(p * p, cfg.c_noisy, d)
        extra = np.zeros((p * p, 2 * cfg.c_latent, d), np.float32)
        wide = np.concatenate([base, extra], axis=1).reshape(-1, d)
        params["input_proj.weight"] = Parameter("input_proj.weight", wide)
    elif cfg.mode is InjectionMode.CONTROLNET:
        for i in range(cfg.layers):
            _block_params(params, rng, f"ctrl_blocks.{i}", d, cfg.ffn_mult)
            _linear(params, rng, f"bridges.{i}", d, d, zero=True)
    return params


def param_census(params: dict[str, Parameter]) -> tuple[int, dict[str, int]]:
    sizes = {name: p.value.size for name, p in params.items()}
    return sum(sizes.values()), sizes


def set_finetune_mode(params: dict[str, Parameter], mode: str) -> list[str]:
    """Set trainable flags; returns the sorted trainable-parameter names."""
    if mode not in ("all-dit", "3d-attn-only"):
        raise ValueError(f"unknown finetune mode {mode!r}")
    for p in params.values():
        p.trainable = (mode == "all-dit") or (".attn3d." in p.name)
    return sorted(name for name, p in params.items() if p.trainable)


# ---------------------------------------------------------------------------
# fixed (non-learned) encodings

def _sincos(pos: np.ndarray, dim: int) -> np.ndarray:
    """Classic transformer sinusoids for integer/real positions, [n, dim]."""
    pos = np.atleast_1d(np.asarray(pos, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = pos[:, None] * freqs[None, :]
    out = np.zeros((pos.shape[0], dim), np.float32)
    out[:, :half] = np.sin(ang)
    out[:, half:2 * half] = np.cos(ang)
    return out


@lru_cache(maxsize=16)
def positional_encoding(grid: tuple[int, int, int], d: int) -> np.ndarray:
    """Factorized (frame, row, col) sinusoids, concatenated to width d.
    Identical for every segment so aligned tokens share positions."""
    fp, hp, wp = grid
    dc = d // 3
    dr = d // 3
    df = d - dc - dr
    ef = _sincos(np.arange(fp), df)
    er = _sincos(np.arange(hp), dr)
    ec = _sincos(np.arange(wp), dc)
    out = np.zeros((fp, hp, wp, d), np.float32)
    out[..., :df] = ef[:, None, None, :]
    out[..., df:df + dr] = er[None, :, None, :]
    out[..., df + dr:] = ec[None, None, :, :]
    return out.reshape(fp * hp * wp, d)


def time_embedding_input(t: float, d: int) -> np.ndarray:
    """Sinusoidal features of the diffusion time, [1, d]."""
    return _sincos(np.array([t * 1000.0]), d)


@lru_cache(maxsize=16)
def _mask_2d(segments: int, grid: tuple[int, int, int]) -> np.ndarray:
    """Additive mask restricting attention to the same (segment, frame)."""
    fp, hp, wp = grid
    frame_of = np.repeat(np.arange(segments * fp), hp * wp)
    allowed = frame_of[:, None] == frame_of[None, :]
    return np.where(allowed, 0.0, -1e30).astype(np.float32)


# ---------------------------------------------------------------------------
# forward

class _P:
    """Watches parameters on one tape, caching the Tensor handles."""

    def __init__(self, params: dict[str, Parameter], tape: T.Tape):
        self._params = params
        self._tape = tape
        self._cache: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        if name not in self._cache:
            self._cache[name] = self._tape.watch(self._params[name])
        return self._cache[name]


def _linear_t(p: _P, name: str, x: Tensor) -> Tensor:
    return T.add(T.matmul(x, p[f"{name}.weight"]), p[f"{name}.bias"])


def _ln(p: _P, name: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, p[f"{name}.gain"], p[f"{name}.bias"])


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    n = x.shape[0]
    return T.permute(T.reshape(x, (n, heads, head_dim)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, hd = x.shape
    return T.reshape(T.permute(x, (1, 0, 2)), (n, h * hd))


def _attention(q: Tensor, k: Tensor, v: Tensor, heads: int, head_dim: int,
               mask: np.ndarray | None, record: dict | None, key: str) -> Tensor:
    qh = _split_heads(q, heads, head_dim)
    kh = _split_heads(k, heads, head_dim)
    vh = _split_heads(v, heads, head_dim)
    scores = T.scale(T.matmul(qh, T.permute(kh, (0, 2, 1))), 1.0 / math.sqrt(head_dim))
    if mask is not None:
        scores = T.add(scores, mask[None, :, :])
    attn = T.softmax(scores, axis=-1)
    if record is not None:
        record[key] = attn.data.copy()
    return _merge_heads(T.matmul(attn, vh))


def _self_attn(p: _P, prefix: str, x: Tensor, heads: int, head_dim: int,
               mask: np.ndarray | None, record, key,
               extra_kv: Tensor | None = None) -> Tensor:
    d = heads * head_dim
    qkv = _linear_t(p, f"{prefix}.qkv", x)  # queries always from the trunk
    q = qkv[:, :d]
    if extra_kv is None:
        k, v = qkv[:, d:2 * d], qkv[:, 2 * d:]
    else:
        full = T.concat([x, extra_kv], axis=0)
        kv = _linear_t(p, f"{prefix}.qkv", full)
        k, v = kv[:, d:2 * d], kv[:, 2 * d:]
    out = _attention(q, k, v, heads, head_dim, mask, record, key)
    return _linear_t(p, f"{prefix}.proj", out)


def _cross_attn(p: _P, prefix: str, x: Tensor, text: Tensor, heads: int,
                head_dim: int, record, key) -> Tensor:
    d = heads * head_dim
    q = _linear_t(p, f"{prefix}.q", x)
    kv = _linear_t(p, f"{prefix}.kv", text)
    out = _attention(q, kv[:, :d], kv[:, d:], heads, head_dim, None, record, key)
    return _linear_t(p, f"{prefix}.proj", out)


def _ffn(p: _P, prefix: str, x: Tensor) -> Tensor:
    return _linear_t(p, f"{prefix}.fc2", T.gelu(_linear_t(p, f"{prefix}.fc1", x)))


def _block(p: _P, prefix: str, cfg: ModelConfig, x: Tensor, text: Tensor,
           mask2d: np.ndarray, record, extra_kv: Tensor | None = None) -> Tensor:
    h, hd = cfg.heads, cfg.head_dim
    x = T.add(x, _self_attn(p, f"{prefix}.attn2d", _ln(p, f"{prefix}.ln1", x),
                            h, hd, mask2d, record, f"{prefix}.attn2d"))
    x = T.add(x, _self_attn(p, f"{prefix}.attn3d", _ln(p, f"{prefix}.ln2", x),
                            h, hd, None, record, f"{prefix}.attn3d",
                            extra_kv=extra_kv))
    x = T.add(x, _cross_attn(p, f"{prefix}.xattn", _ln(p, f"{prefix}.ln3", x),
                             text, h, hd, record, f"{prefix}.xattn"))
    x = T.add(x, _ffn(p, f"{prefix}.ffn", _ln(p, f"{prefix}.ln4", x)))
    return x


def _pad_channels(latent: np.ndarray, c_to: int) -> np.ndarray:
    pad = c_to - latent.shape[-1]
    if pad < 0:
        raise ValueError(f"latent channels {latent.shape[-1]} exceed {c_to}")
    if pad == 0:
        return latent
    return np.concatenate(
        [latent, np.zeros((*latent.shape[:-1], pad), latent.dtype)], axis=-1)


def _embed_segment(p: _P, cfg: ModelConfig, channels: np.ndarray, seg_idx: int,
                   t_feats: Tensor) -> Tensor:
    """Patchify one segment's channel stack and embed it: input projection
    plus positional, segment, and timestep terms."""
    patches, grid = patchify(channels.astype(np.float32), cfg.patch)
    tok = _linear_t(p, "input_proj", Tensor(patches))
    pos = positional_encoding(grid, cfg.d_model)
    seg = p["segment_embed"][seg_idx:seg_idx + 1, :]
    return T.add(T.add(T.add(tok, pos), seg), t_feats)


def _time_features(p: _P, cfg: ModelConfig, t: float) -> Tensor:
    h = T.gelu(_linear_t(p, "t_embed.fc1", Tensor(time_embedding_input(t, cfg.d_model))))
    return _linear_t(p, "t_embed.fc2", h)


def _check_finite(x: Tensor, where: str):
    if not np.isfinite(x.data).all():
        raise FloatingPointError(f"non-finite activations after {where}")


def forward(params: dict[str, Parameter], cfg: ModelConfig, noisy: np.ndarray,
            cam: np.ndarray, cont: np.ndarray, t: float, text_ids: np.ndarray,
            tape: T.Tape | None = None, record: dict | None = None) -> Tensor:
    """Predicted velocity on the noisy segment, [f', h', w', c_latent].

    noisy: [f', h', w', 2*c'+1] channel stack (latent, first-frame, mask);
    cam/cont: [f', h', w', c'] condition latents; t in [0, 1]; text_ids
    length-n_text int vector.
    """
    fp, hp, wp = cfg.grid
    c = cfg.c_latent
    if noisy.shape != (fp, hp * cfg.patch, wp * cfg.patch, cfg.c_noisy):
        raise ValueError(f"noisy stack shape {noisy.shape} does not match config")
    for name, lat in (("cam", cam), ("cont", cont)):
        if lat.shape != (fp, hp * cfg.patch, wp * cfg.patch, c):
            raise ValueError(f"{name} latent shape {lat.shape} does not match config")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    if np.any(np.asarray(text_ids) >= cfg.vocab_size) or np.any(np.asarray(text_ids) < 0):
        raise ValueError("text id outside vocabulary")

    tape = tape or T.Tape()
    p = _P(params, tape)
    n_seg = cfg.tokens_per_segment

    text = T.add(T.gather_rows(p["text_embed"], text_ids),
                 _sincos(np.arange(len(text_ids)), cfg.d_model))

    t_noisy = _time_features(p, cfg, t)
    t_cond = _time_features(p, cfg, 0.0)

    mode = cfg.mode
    extra_kv = None
    ctrl = None
    if mode is InjectionMode.CHANNEL_CONCAT:
        stack = np.concatenate([noisy, cam, cont], axis=-1)
        x = _embed_segment(p, cfg, stack, 0, t_noisy)
        segments = 1
    elif mode is InjectionMode.FRAME_CONCAT:
        x = T.concat([
            _embed_segment(p, cfg, noisy, 0, t_noisy),
            _embed_segment(p, cfg, _pad_channels(cam, cfg.c_noisy), 1, t_cond),
            _embed_segment(p, cfg, _pad_channels(cont, cfg.c_noisy), 2, t_cond),
        ], axis=0)
        segments = 3
    elif mode is InjectionMode.TEMPORAL_ONLY:
        x = _embed_segment(p, cfg, noisy, 0, t_noisy)
        extra_kv = T.concat([
            _embed_segment(p, cfg, _pad_channels(cam, cfg.c_noisy), 1, t_cond),
            _embed_segment(p, cfg, _pad_channels(cont, cfg.c_noisy), 2, t_cond),
        ], axis=0)
        segments = 1
    else:  # ControlNet-like
        x = _embed_segment(p, cfg, noisy, 0, t_noisy)
        ctrl = T.concat([
            _embed_segment(p, cfg, _pad_channels(cam, cfg.c_noisy), 1, t_cond),
            _embed_segment(p, cfg, _pad_channels(cont, cfg.c_noisy), 2, t_cond),
        ], axis=0)
        segments = 1

    mask2d = _mask_2d(segments, cfg.grid)
    ctrl_mask2d = _mask_2d(2, cfg.grid) if ctrl is not None else None

    for i in range(cfg.layers):
        x = _block(p, f"blocks.{i}", cfg, x, text, mask2d, record, extra_kv=extra_kv)
        if ctrl is not None:
            ctrl = _block(p, f"ctrl_blocks.{i}", cfg, ctrl, text, ctrl_mask2d, record)
            merged = T.add(ctrl[:n_seg, :], ctrl[n_seg:, :])
            x = T.add(x, _linear_t(p, f"bridges.{i}", merged))
        _check_finite(x, f"block {i}")

    out = _linear_t(p, "out_head", _ln(p, "final_ln", x[:n_seg, :]))
    patch_grid = T.reshape(out, (fp, hp, wp, cfg.patch, cfg.patch, c))
    latent = T.reshape(T.permute(patch_grid, (0, 1, 3, 2, 4, 5)),
                       (fp, hp * cfg.patch, wp * cfg.patch, c))
    return latent
