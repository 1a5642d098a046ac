"""Template prompts over a tiny closed vocabulary.

Scene descriptions are generated from the scene spec itself, so the text
pathway is exercised with consistent (description, video) pairs without any
pretrained encoder.  Token id 0 is the null/padding token.
"""

from __future__ import annotations

import numpy as np

from .scene import SceneSpec

__all__ = ["VOCAB", "NULL_ID", "vocab_id", "describe", "encode_prompt", "pad_ids"]

_COUNTS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight"]

VOCAB = (
    ["<null>", "a", "scene", "with", "and", "on", "checkered", "ground",
     "box", "boxes", "sphere", "spheres", "moving", "subject", "subjects",
     "bright", "dim", "light"]
    + _COUNTS
)

_IDS = {w: i for i, w in enumerate(VOCAB)}
NULL_ID = 0


def vocab_id(word: str) -> int:
    if word not in _IDS:
        raise KeyError(f"word {word!r} not in vocabulary")
    return _IDS[word]


def _plural(n: int, single: str, many: str) -> str:
    return f"{_COUNTS[n]} {single if n == 1 else many}"


def describe(scene: SceneSpec) -> str:
    """Deterministic one-line description of a scene."""
    light = "bright" if scene.ambient >= 0.325 else "dim"
    return (f"a scene with {_plural(len(scene.boxes), 'box', 'boxes')} "
            f"and {_plural(len(scene.spheres), 'sphere', 'spheres')} "
            f"and {_plural(len(scene.subjects), 'subject', 'subjects')} moving "
            f"on checkered ground with {light} light")


def encode_prompt(text: str) -> np.ndarray:
    """Whitespace-tokenized strict lookup; empty text maps to [NULL_ID]."""
    words = text.split()
    if not words:
        return np.array([NULL_ID], dtype=np.int64)
    return np.array([vocab_id(w) for w in words], dtype=np.int64)


def pad_ids(ids: np.ndarray, length: int) -> np.ndarray:
    """Clip or null-pad to a fixed length."""
    ids = np.asarray(ids, dtype=np.int64)[:length]
    out = np.full(length, NULL_ID, dtype=np.int64)
    out[:len(ids)] = ids
    return out
