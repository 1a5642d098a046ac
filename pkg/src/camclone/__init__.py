"""camclone: reference-based camera motion cloning for video generation,
desk scale and fully deterministic.

Subsystems:

- ``tensor`` / ``optim``: numpy-backed reverse-mode autodiff and Adam
- ``checkpoint``: bit-exact binary weight serialization
- ``geometry``: SE(3) poses, pinhole projection, camera-trajectory metrics,
  pose recovery from 2d-3d correspondences
- ``trajectory``: rule-based camera trajectory synthesis and validation
- ``scene`` / ``render``: procedural scene construction and a z-buffered
  software rasterizer with marker spheres for pose recovery
- ``tokenizer``: lossless pixel-shuffle video tokenizer
- ``model``: rectified-flow video transformer with reference conditioning
- ``train`` / ``evaluate``: training loop, sampling, and the metric harness
- ``cli``: command line entry points
"""

__version__ = "0.1.0"
