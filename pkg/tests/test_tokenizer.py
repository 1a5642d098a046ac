"""Pixel-shuffle latent rearrangement: shapes, exactness, inverses."""

import numpy as np
import pytest

from camclone.tokenizer import (
    decode,
    encode,
    from_unit,
    latent_channels,
    latent_frames,
    patchify,
    to_unit,
    unpatchify,
)


def _video(f, h=48, w=84, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(f, h, w, 3), dtype=np.uint8)


def test_shapes_divisible():
    z = encode(_video(16))
    assert z.shape == (4, 12, 21, 192)
    assert z.dtype == np.float32
    assert latent_channels() == 192


def test_shapes_causal():
    z = encode(_video(17))
    assert z.shape == (5, 12, 21, 192)
    assert latent_frames(17) == 5
    assert latent_frames(16) == 4
    with pytest.raises(ValueError):
        latent_frames(15)


def test_round_trip_divisible():
    v = _video(16)
    assert np.array_equal(decode(encode(v)), v)


def test_round_trip_causal():
    v = _video(17, seed=3)
    assert np.array_equal(decode(encode(v), frames=17), v)


def test_decode_frame_disambiguation():
    v13 = _video(13, seed=1)
    v16 = _video(16, seed=2)
    assert encode(v13).shape == encode(v16).shape  # both 4 latent frames
    assert np.array_equal(decode(encode(v13), frames=13), v13)
    assert np.array_equal(decode(encode(v16)), v16)
    with pytest.raises(ValueError):
        decode(encode(v16), frames=12)


def test_constant_video_constant_latent():
    v = np.full((16, 48, 84, 3), 200, dtype=np.uint8)
    z = encode(v)
    assert np.allclose(z, z.reshape(-1, 192)[0])


def test_unit_mapping_round_trips_all_bytes():
    u = np.arange(256, dtype=np.uint8).reshape(1, 16, 16, 1).repeat(3, axis=-1)
    x = to_unit(u)
    assert x.min() >= -1.0 and x.max() <= 1.0
    assert np.array_equal(from_unit(x), u)
    assert from_unit(np.array([-2.0, 2.0])).tolist() == [0, 255]


def test_encode_validation():
    with pytest.raises(ValueError):
        encode(_video(16, h=50))  # 50 % 4 != 0
    with pytest.raises(ValueError):
        encode(_video(14))
    with pytest.raises(ValueError):
        encode(np.zeros((4, 8, 8, 4), dtype=np.uint8))
    with pytest.raises(ValueError):
        to_unit(np.zeros((2, 4, 4, 3), dtype=np.float32))


def test_causal_first_latent_frame_is_replicated_frame0():
    v = _video(17, seed=9)
    z = encode(v)
    z0 = z[0].reshape(12, 21, 4, 4, 4, 3)  # [h', w', dt, sy, sx, 3]
    for dt in range(1, 4):
        assert np.array_equal(z0[:, :, dt], z0[:, :, 0])
    # dt slice 0 reproduces frame 0 exactly
    rebuilt = from_unit(z0[:, :, 0].transpose(0, 2, 1, 3, 4).reshape(48, 84, 3))
    assert np.array_equal(rebuilt, v[0])


def test_patchify_counts_and_inverse():
    z = encode(_video(16, seed=5))
    toks, layout = patchify(z, 3)
    assert layout == (4, 4, 7)
    assert toks.shape == (4 * 4 * 7, 9 * 192)
    assert np.array_equal(unpatchify(toks, layout, 3), z)
    toks1, layout1 = patchify(z, 1)
    assert toks1.shape == (4 * 12 * 21, 192)
    assert np.array_equal(unpatchify(toks1, layout1, 1), z)


def test_patchify_token_order_frame_major():
    z = encode(_video(16, seed=6))
    toks, (fp, hp, wp) = patchify(z, 3)
    # token (fi, 0, 0) starts with the latent value at [fi, 0, 0, :]
    for fi in range(fp):
        tok = toks[fi * hp * wp]
        assert np.array_equal(tok[:192], z[fi, 0, 0])


def test_patchify_validation():
    z = encode(_video(16))
    with pytest.raises(ValueError):
        patchify(z, 5)  # 12 % 5 != 0
    toks, layout = patchify(z, 3)
    with pytest.raises(ValueError):
        unpatchify(toks[:-1], layout, 3)


def test_full_pipeline_on_rendered_clip():
    from camclone.render import render_video
    from camclone.scene import DEFAULT_INTRINSICS, SCENE_CENTER, build_scene
    from camclone.geometry import look_at_pose
    from camclone.trajectory import Easing, RuleKind, TrajectoryRule, synthesize

    scene = build_scene(21)
    anchor = look_at_pose(np.array([0.0, 3.4, 5.3]), SCENE_CENTER)
    rule = TrajectoryRule(RuleKind.PAN, 8.0, Easing.CUBIC)
    traj = synthesize(rule, 17, 8.0, anchor)
    video = render_video(scene, traj, DEFAULT_INTRINSICS)
    z = encode(video)
    assert z.shape == (5, 12, 21, 192)
    assert np.array_equal(decode(z, frames=17), video)
