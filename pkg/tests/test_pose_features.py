import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textmotion.errors import ContractError, FormatError, ShapeError
from textmotion.pose_features import (CONTACT, FEATURE_DIM, POS, ROOT, ROT, STD_FLOOR, VEL, MotionFeatureSequence,
                                      Normalizer, SkeletonClip, de_normalize, featurize, initial_root_of, normalize,
                                      read_features, recover, write_features)
from textmotion.skeleton import N_JOINTS, rest_pose
from textmotion.synth import PRIMITIVES, synth_clip, synth_generate


def standing(T=30, fps=30.0):
    return SkeletonClip(fps, np.repeat(rest_pose()[None], T, axis=0))


def test_layout_adds_up():
    assert FEATURE_DIM == 263
    assert (ROOT.stop - ROOT.start, POS.stop - POS.start, ROT.stop - ROT.start,
            VEL.stop - VEL.start, CONTACT.stop - CONTACT.start) == (4, 63, 126, 66, 4)
    assert CONTACT.stop == FEATURE_DIM
    assert featurize(standing()).features.shape == (29, 263)


def test_stationary_clip_has_zero_velocities():
    f = featurize(standing()).features
    assert np.all(f[:, :3] == 0)
    assert np.all(f[:, VEL] == 0)
    assert np.all(f[:, CONTACT] == 1)


def test_constant_translation():
    T, fps, speed = 40, 30.0, 1.5
    P = np.repeat(rest_pose()[None], T, axis=0)
    P[..., 0] += speed / fps * np.arange(T)[:, None]
    f = featurize(SkeletonClip(fps, P)).features
    np.testing.assert_allclose(f[:, 1], 0.05, atol=1e-12)
    np.testing.assert_allclose(f[:, [0, 2]], 0.0, atol=1e-12)


def test_contact_threshold_definition():
    T = 20
    P = np.repeat(rest_pose()[None], T, axis=0)
    P[:, 7, 1] += 0.05 * np.arange(T)  # left ankle lifts 5 cm/frame: speed^2 = 0.0025
    P[:, 10, 1] += 0.04 * np.arange(T)  # left toe 4 cm/frame: speed^2 = 0.0016 < 0.002
    c = featurize(SkeletonClip(30.0, P)).features[:, CONTACT]
    assert np.all(c[:, 0] == 0) and np.all(c[:, 1] == 1) and np.all(c[:, 2:] == 1)


def test_rotation_features_are_orthonormal_columns():
    f = featurize(synth_clip("wave", 60, np.random.default_rng(1)).clip).features
    r = f[:, ROT].reshape(len(f), N_JOINTS - 1, 2, 3)
    np.testing.assert_allclose(np.linalg.norm(r, axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(np.sum(r[:, :, 0] * r[:, :, 1], axis=-1), 0.0, atol=1e-9)


def test_unsupported_skeleton():
    with pytest.raises(ContractError, match="unsupported skeleton"):
        featurize(SkeletonClip(30.0, np.zeros((5, 21, 3))))


@pytest.mark.parametrize("fps,joints,exc", [
    (0.0, np.zeros((3, 22, 3)), ContractError),
    (30.0, np.zeros((1, 22, 3)), ContractError),
    (30.0, np.full((3, 22, 3), np.nan), ContractError),
    (30.0, np.zeros((3, 22, 2)), ShapeError),
])
def test_clip_invariants(fps, joints, exc):
    with pytest.raises(exc):
        SkeletonClip(fps, joints)


def test_round_trip_fifty_synthetic_clips():
    clips = synth_generate(11, 50, max_s=10.0)
    worst = 0.0
    for s in clips:
        clip = s.clip
        assert clip.n_frames <= 300
        back = recover(featurize(clip), initial_root_of(clip), clip.fps)
        worst = max(worst, float(np.abs(back.joints - clip.joints).max()))
    assert worst <= 1e-4


@pytest.mark.parametrize("name", PRIMITIVES)
def test_featurize_recover_featurize(name):
    clip = synth_clip(name, 90, np.random.default_rng(3)).clip
    f = featurize(clip).features
    f2 = featurize(recover(f, initial_root_of(clip))).features
    assert np.abs(f2 - f).max() <= 1e-5


def test_zero_velocity_features_freeze_the_pose():
    f = featurize(standing(10)).features
    out = recover(f).joints
    assert np.abs(out - out[0]).max() < 1e-12


def test_recover_dimension_error():
    with pytest.raises(ShapeError):
        recover(np.zeros((4, 200)))


@given(dx=st.floats(-50, 50), dy=st.floats(-1, 1), dz=st.floats(-50, 50), seed=st.integers(0, 50))
@settings(max_examples=25, deadline=None)
def test_contacts_invariant_under_translation(dx, dy, dz, seed):
    clip = synth_clip(PRIMITIVES[seed % len(PRIMITIVES)], 45, np.random.default_rng(seed)).clip
    moved = SkeletonClip(clip.fps, clip.joints + np.array([dx, dy, dz]))
    np.testing.assert_array_equal(featurize(moved).features[:, CONTACT], featurize(clip).features[:, CONTACT])


class TestNormalization:
    def test_constant_dimension_goes_to_zero(self):
        x = np.random.default_rng(0).normal(size=(50, 263))
        x[:, 7] = 3.0
        norm = Normalizer.fit([x])
        assert norm.std[7] == STD_FLOOR
        assert np.all(norm.normalize(x)[:, 7] == 0)

    def test_training_mean_is_zero(self):
        rng = np.random.default_rng(1)
        seqs = [rng.normal(2.0, 3.0, size=(rng.integers(5, 40), 263)) for _ in range(6)]
        norm = Normalizer.fit(seqs)
        z = norm.normalize(np.concatenate(seqs))
        assert np.abs(z.mean(0)).max() <= 1e-6

    def test_exact_inverse(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(30, 263)) * rng.uniform(0, 10, 263)
        seq = MotionFeatureSequence(x)
        norm = Normalizer.fit([x])
        back = de_normalize(normalize(seq, norm))
        assert not back.normalized
        assert np.abs(back.features - x).max() <= 1e-6


class TestFiles:
    def test_feature_file_round_trip(self, tmp_path):
        f = featurize(synth_clip("walk", 40, np.random.default_rng(0)).clip)
        write_features(tmp_path / "a.gm3f", f)
        back = read_features(tmp_path / "a.gm3f")
        np.testing.assert_allclose(back.features, f.features, rtol=1e-6, atol=1e-6)

    def test_feature_file_layout(self, tmp_path):
        x = np.arange(2 * 263, dtype=np.float64).reshape(2, 263)
        write_features(tmp_path / "b.gm3f", MotionFeatureSequence(x))
        raw = (tmp_path / "b.gm3f").read_bytes()
        assert raw[:4] == b"GM3F"
        assert struct.unpack_from("<HII", raw, 4) == (1, 2, 263)
        assert len(raw) == 14 + 4 * (2 * 263 + 2 * 263)

    def test_normalized_sequence_is_stored_raw(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(6, 263))
        norm = Normalizer.fit([x])
        write_features(tmp_path / "c.gm3f", normalize(MotionFeatureSequence(x), norm))
        back = read_features(tmp_path / "c.gm3f")
        np.testing.assert_allclose(back.features, x, atol=1e-5)
        np.testing.assert_allclose(back.mean, norm.mean, atol=1e-6)

    def test_bad_files(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FormatError):
            read_features(tmp_path / "x")
        write_features(tmp_path / "y", MotionFeatureSequence(np.zeros((2, 263))))
        raw = (tmp_path / "y").read_bytes()
        (tmp_path / "y").write_bytes(raw[:-8])
        with pytest.raises(FormatError):
            read_features(tmp_path / "y")

    def test_clip_json_round_trip(self, tmp_path):
        clip = synth_clip("jump", 20, np.random.default_rng(0)).clip
        clip.save(tmp_path / "c.json")
        back = SkeletonClip.load(tmp_path / "c.json")
        assert back.fps == clip.fps and back.names == clip.names
        assert np.abs(back.joints - clip.joints).max() <= 5e-7

    def test_clip_json_missing_field(self):
        with pytest.raises(FormatError):
            SkeletonClip.from_json({"fps": 30})
