"""Lossless video <-> latent rearrangement.

The "latent" here is an exact space/time-to-channel pixel shuffle, not a
learned code: a video [f, h, w, 3] in [-1, 1] becomes [f', h', w', c'] with
c' = 3 * ft * s**2.  Temporal grouping is either uniform (f divisible by ft)
or causal (f = 1 + ft*k): in the causal form the first video frame occupies
latent frame 0 alone (replicated along the temporal sub-axis, dropped again on
decode), mirroring how clip lengths of 4k+1 are grouped 1 + 4 + 4 + ...

Patch rearrangement for the transformer is also here (pure part only): each
token is a flattened p x p x c' spatial patch of one latent frame.  The
learned projection to model width belongs to the model, where its parameters
and gradients live.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "TEMPORAL_FACTOR",
    "SPATIAL_FACTOR",
    "latent_channels",
    "to_unit",
    "from_unit",
    "encode",
    "decode",
    "latent_frames",
    "patchify",
    "unpatchify",
]

TEMPORAL_FACTOR = 4
SPATIAL_FACTOR = 4


def latent_channels(ft: int = TEMPORAL_FACTOR, s: int = SPATIAL_FACTOR) -> int:
    return 3 * ft * s * s


def to_unit(video: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [-1, 1]."""
    if video.dtype != np.uint8:
        raise ValueError(f"expected uint8 video, got {video.dtype}")
    return (video.astype(np.float32) / 127.5) - 1.0


def from_unit(x: np.ndarray) -> np.ndarray:
    """float [-1, 1] -> uint8, clamped and rounded."""
    return np.clip(np.rint((np.clip(x, -1.0, 1.0) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def latent_frames(f: int, ft: int = TEMPORAL_FACTOR) -> int:
    if f > 0 and f % ft == 0:
        return f // ft
    if f % ft == 1:  # causal form, single leading frame (f = 1 included)
        return 1 + (f - 1) // ft
    raise ValueError(f"frame count {f} is neither divisible by {ft} nor of the form {ft}*k+1")


def _group_frames(x: np.ndarray, ft: int) -> np.ndarray:
    """[f, h, w, 3] -> [f', ft, h, w, 3] with causal handling of f = ft*k+1."""
    f = x.shape[0]
    if f % ft == 0:
        return x.reshape(f // ft, ft, *x.shape[1:])
    head = np.broadcast_to(x[0], (1, ft, *x.shape[1:]))
    tail = x[1:].reshape((f - 1) // ft, ft, *x.shape[1:])
    return np.concatenate([head, tail], axis=0)


def encode(video: np.ndarray, ft: int = TEMPORAL_FACTOR, s: int = SPATIAL_FACTOR) -> np.ndarray:
    """uint8 video [f, h, w, 3] -> float32 latent [f', h/s, w/s, 3*ft*s*s]."""
    f, h, w, c = video.shape
    if c != 3:
        raise ValueError(f"expected 3 channels, got {c}")
    if h % s or w % s:
        raise ValueError(f"spatial size {h}x{w} not divisible by {s}")
    latent_frames(f, ft)  # validates the frame count
    x = _group_frames(to_unit(video), ft)  # [f', ft, h, w, 3]
    fp = x.shape[0]
    x = x.reshape(fp, ft, h // s, s, w // s, s, 3)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)  # [f', h', w', ft, sy, sx, 3]
    return np.ascontiguousarray(x.reshape(fp, h // s, w // s, 3 * ft * s * s))


def decode(latent: np.ndarray, ft: int = TEMPORAL_FACTOR, s: int = SPATIAL_FACTOR,
           frames: int | None = None) -> np.ndarray:
    """Exact inverse of encode.  ``frames`` disambiguates the causal form;
    None reads the latent as uniformly grouped (f = f' * ft)."""
    fp, hp, wp, c = latent.shape
    if c != 3 * ft * s * s:
        raise ValueError(f"channel count {c} != {3 * ft * s * s}")
    if frames is None:
        frames = fp * ft
    if latent_frames(frames, ft) != fp:
        raise ValueError(f"{frames} frames do not group into {fp} latent frames")
    x = latent.reshape(fp, hp, wp, ft, s, s, 3)
    x = x.transpose(0, 3, 1, 4, 2, 5, 6)  # [f', ft, h', sy, w', sx, 3]
    x = x.reshape(fp, ft, hp * s, wp * s, 3)
    if frames % ft:
        x = np.concatenate([x[0, :1], x[1:].reshape(-1, hp * s, wp * s, 3)], axis=0)
    else:
        x = x.reshape(-1, hp * s, wp * s, 3)
    return from_unit(x)


def patchify(latent: np.ndarray, p: int):
    """[f', h', w', c'] -> (patches [f'*hp*wp, p*p*c'], layout (f', hp, wp)).
    Token order: frame-major, then patch row, then patch column."""
    fp, h, w, c = latent.shape
    if h % p or w % p:
        raise ValueError(f"latent size {h}x{w} not divisible by patch {p}")
    hp, wp = h // p, w // p
    x = latent.reshape(fp, hp, p, wp, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(fp * hp * wp, p * p * c)), (fp, hp, wp)


def unpatchify(patches: np.ndarray, layout: tuple[int, int, int], p: int) -> np.ndarray:
    """Exact inverse of patchify."""
    fp, hp, wp = layout
    n, d = patches.shape
    if n != fp * hp * wp or d % (p * p):
        raise ValueError(f"patch grid {patches.shape} does not match layout {layout}, p={p}")
    c = d // (p * p)
    x = patches.reshape(fp, hp, wp, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(fp, hp * p, wp * p, c))
