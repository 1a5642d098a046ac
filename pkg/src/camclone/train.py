"""Rectified-flow training and Euler sampling.

The flow interpolates x_t = (1-t) x + t z between data x and noise z; the
network regresses the constant velocity z - x on the noisy segment, and
sampling integrates the ODE from t=1 to t=0 with fixed Euler steps.

Each training step draws the task per example: image-to-video (the content
reference is a zero latent and the first target frame enters through the
noisy segment's extra channels) or video-to-video (content reference active,
first-frame channels and mask zero), half and half in expectation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .model import ModelConfig, forward
from .optim import Adam
from .prompts import describe, encode_prompt, pad_ids
from .render import load_video, render_triple
from .scene import DatasetManifest, TripleIndex
from .tensor import Parameter
from .tokenizer import encode

__all__ = [
    "DivergenceError",
    "rf_noised",
    "velocity_target",
    "build_noisy_stack",
    "sample_task",
    "Example",
    "Batch",
    "examples_from_render",
    "examples_from_dir",
    "make_batch",
    "train_step",
    "run_training",
    "euler_sample",
    "sample_video",
]


class DivergenceError(RuntimeError):
    """Loss blew up or produced non-finite values."""


def rf_noised(x: np.ndarray, z: np.ndarray, t: float) -> np.ndarray:
    if x.shape != z.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {z.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    return (1.0 - t) * x + t * z


def velocity_target(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    if x.shape != z.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {z.shape}")
    return z - x


def build_noisy_stack(x_t: np.ndarray, first_frame: np.ndarray | None) -> np.ndarray:
    """[x_t | first-frame latent broadcast over time | mask] along channels.
    ``first_frame`` is a single-latent-frame tensor [1, h', w', c'], or None
    for video-to-video batches (zero channels, zero mask)."""
    fp, h, w, c = x_t.shape
    if first_frame is None:
        ff = np.zeros_like(x_t)
        mask = np.zeros((fp, h, w, 1), x_t.dtype)
    else:
        if first_frame.shape != (1, h, w, c):
            raise ValueError(f"first-frame latent {first_frame.shape} != (1, {h}, {w}, {c})")
        ff = np.broadcast_to(first_frame, x_t.shape)
        mask = np.zeros((fp, h, w, 1), x_t.dtype)
        mask[0] = 1.0
    return np.concatenate([x_t, ff, mask], axis=-1).astype(np.float32)


def sample_task(rng: np.random.Generator) -> str:
    return "i2v" if rng.random() < 0.5 else "v2v"


@dataclass
class Example:
    """One prepared training triple: latents plus the prompt ids."""

    x: np.ndarray       # target latent [f', h', w', c']
    cam: np.ndarray     # camera-reference latent
    cont: np.ndarray    # content-reference latent
    first: np.ndarray   # first-target-frame latent [1, h', w', c']
    text_ids: np.ndarray


@dataclass
class Batch:
    task: str
    x: np.ndarray
    z: np.ndarray
    t: float
    cam: np.ndarray
    cont: np.ndarray
    first: np.ndarray | None  # None for v2v
    text_ids: np.ndarray


def _example_from_videos(v_cam, v_cont, v, prompt: str, cfg: ModelConfig) -> Example:
    return Example(
        x=encode(v, cfg.ft, cfg.s),
        cam=encode(v_cam, cfg.ft, cfg.s),
        cont=encode(v_cont, cfg.ft, cfg.s),
        first=encode(v[:1], cfg.ft, cfg.s),
        text_ids=pad_ids(encode_prompt(prompt), cfg.n_text),
    )


def examples_from_render(manifest: DatasetManifest, triples: list[TripleIndex],
                         cfg: ModelConfig) -> list[Example]:
    """Render the triples in memory (no dataset directory needed)."""
    groups = {g.group_id: g for g in manifest.groups}
    out = []
    for tr in triples:
        g = groups[tr.group_id]
        v_cam, v_cont, v = render_triple(g, tr, manifest.frames, manifest.fps,
                                         manifest.intrinsics)
        out.append(_example_from_videos(v_cam, v_cont, v,
                                        describe(g.locations[tr.target[0]]), cfg))
    return out


def examples_from_dir(dataset_dir, manifest: DatasetManifest,
                      triples: list[TripleIndex], cfg: ModelConfig) -> list[Example]:
    """Load the triples' videos from an emitted dataset directory."""
    root = Path(dataset_dir)
    groups = {g.group_id: g for g in manifest.groups}
    out = []
    for tr in triples:
        g = groups[tr.group_id]
        v = load_video(root / manifest.video_path(tr.group_id, *tr.target))
        v_cam = load_video(root / manifest.video_path(tr.group_id, *tr.cam_ref))
        v_cont = load_video(root / manifest.video_path(tr.group_id, *tr.cont_ref))
        out.append(_example_from_videos(v_cam, v_cont, v,
                                        describe(g.locations[tr.target[0]]), cfg))
    return out


def make_batch(ex: Example, rng: np.random.Generator, task: str | None = None) -> Batch:
    task = task or sample_task(rng)
    z = rng.standard_normal(ex.x.shape).astype(np.float32)
    t = float(rng.uniform())
    if task == "i2v":
        cont = np.zeros_like(ex.cont)
        first = ex.first
    else:
        cont = ex.cont
        first = None
    return Batch(task, ex.x, z, t, ex.cam, cont, first, ex.text_ids)


def train_step(params: dict[str, Parameter], cfg: ModelConfig, opt: Adam,
               batches: list[Batch]) -> float:
    """One optimizer update on the mean velocity-MSE over ``batches``."""
    tape = T.Tape()
    total = None
    for b in batches:
        x_t = rf_noised(b.x, b.z, b.t)
        noisy = build_noisy_stack(x_t, b.first)
        pred = forward(params, cfg, noisy, b.cam, b.cont, b.t, b.text_ids, tape=tape)
        item = T.mse_loss(pred, velocity_target(b.x, b.z).astype(np.float32))
        total = item if total is None else T.add(total, item)
    loss = T.scale(total, 1.0 / len(batches))
    value = float(loss.data)
    if not np.isfinite(value) or value > 1e3:
        raise DivergenceError(f"loss {value} (tasks {[b.task for b in batches]})")
    T.backward(loss)
    opt.step(tape)
    return value


def run_training(params: dict[str, Parameter], cfg: ModelConfig,
                 examples: list[Example], steps: int, lr: float, seed: int,
                 batch_size: int = 2, log_path=None, checkpoint_path=None,
                 checkpoint_every: int = 0, callback=None) -> list[float]:
    """Simple-loop trainer: per step, draw ``batch_size`` (example, task, z, t)
    tuples, take one Adam step, append a CSV row (step, loss, task, lr).
    Returns the loss history."""
    rng = np.random.default_rng(seed)
    opt = Adam(list(params.values()), lr=lr)
    losses = []
    log_file = None
    writer = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["step", "loss", "task", "lr"])
    try:
        for step in range(1, steps + 1):
            batches = [make_batch(examples[rng.integers(len(examples))], rng)
                       for _ in range(batch_size)]
            try:
                value = train_step(params, cfg, opt, batches)
            except DivergenceError:
                if log_file:
                    log_file.flush()
                raise
            losses.append(value)
            if writer:
                writer.writerow([step, f"{value:.6f}",
                                 "+".join(b.task for b in batches), lr])
                log_file.flush()
            if checkpoint_path and checkpoint_every and step % checkpoint_every == 0:
                save_checkpoint(checkpoint_path, params)
            if callback:
                callback(step, value)
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params)
    return losses


# ---------------------------------------------------------------------------
# sampling

def euler_sample(velocity_fn, shape, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Integrate dx/dt = v(x, t) from t=1 (pure noise) down to t=0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = rng.standard_normal(shape).astype(np.float32)
    dt = 1.0 / steps
    for i in range(steps):
        t = 1.0 - i * dt
        x = x - dt * velocity_fn(x, t)
    return x


def sample_latent(params: dict[str, Parameter], cfg: ModelConfig, cam: np.ndarray,
                  cont: np.ndarray, first: np.ndarray | None, text_ids: np.ndarray,
                  steps: int, rng: np.random.Generator) -> np.ndarray:
    def velocity(x, t):
        noisy = build_noisy_stack(x, first)
        return forward(params, cfg, noisy, cam, cont, float(t), text_ids).data

    shape = cam.shape
    return euler_sample(velocity, shape, steps, rng)


def sample_video(params: dict[str, Parameter], cfg: ModelConfig, cam: np.ndarray,
                 cont: np.ndarray, first: np.ndarray | None, text_ids: np.ndarray,
                 steps: int = 20, rng: np.random.Generator | None = None) -> np.ndarray:
    """Generate a uint8 video for the given conditions."""
    from .tokenizer import decode

    rng = rng or np.random.default_rng(0)
    latent = sample_latent(params, cfg, cam, cont, first, text_ids, steps, rng)
    return decode(latent, cfg.ft, cfg.s, frames=cfg.frames)
