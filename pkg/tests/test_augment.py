"""Spatial augmentation policy, frame-group shuffling, negative permutations."""

import math

import numpy as np
import pytest

from vidcl.augment import (
    AugmentPolicy,
    GroupPermutation,
    apply_policy,
    group_shuffle,
    jitter_start,
    sample_negative_perms,
)
from vidcl.core import InputError, Rng, VideoTensor


def rand_clip(rng, t=8, h=32, w=32, ch=3, fps=8.0):
    return VideoTensor(rng.uniform(size=(t, h, w, ch)).astype(np.float32), fps=fps)


def identity_policy(size):
    return AugmentPolicy(
        crop_size=size, crop_scale=(1.0, 1.0),
        p_gray=0.0, p_flip=0.0, p_blur=0.0, p_color=0.0,
    )


class TestApplyPolicy:
    def test_identity_policy_is_noop(self):
        clip = rand_clip(Rng(0))
        out = apply_policy(clip, identity_policy(32), Rng(1))
        np.testing.assert_array_equal(out.frames, clip.frames)

    def test_grayscale_makes_channels_equal(self):
        clip = rand_clip(Rng(0))
        policy = AugmentPolicy(crop_size=32, crop_scale=(1.0, 1.0),
                               p_gray=1.0, p_flip=0.0, p_blur=0.0, p_color=0.0)
        out = apply_policy(clip, policy, Rng(1))
        np.testing.assert_allclose(out.frames[..., 0], out.frames[..., 1], rtol=1e-6)
        np.testing.assert_allclose(out.frames[..., 0], out.frames[..., 2], rtol=1e-6)

    def test_deterministic_given_rng_state(self):
        clip = rand_clip(Rng(0))
        policy = AugmentPolicy(crop_size=24)
        a = apply_policy(clip, policy, Rng(7))
        b = apply_policy(clip, policy, Rng(7))
        np.testing.assert_array_equal(a.frames, b.frames)

    def test_preserves_t_and_channels(self):
        clip = rand_clip(Rng(2), t=6, ch=3)
        out = apply_policy(clip, AugmentPolicy(crop_size=16), Rng(3))
        assert out.t == 6 and out.ch == 3
        assert out.h == out.w == 16

    def test_temporally_consistent(self):
        # same augmentation on every frame: a clip of identical frames
        # stays a clip of identical frames
        frame = Rng(4).uniform(size=(1, 32, 32, 3)).astype(np.float32)
        clip = VideoTensor(np.repeat(frame, 8, axis=0))
        out = apply_policy(clip, AugmentPolicy(crop_size=20), Rng(5))
        for t in range(1, 8):
            np.testing.assert_array_equal(out.frames[t], out.frames[0])

    def test_output_in_unit_range(self):
        clip = rand_clip(Rng(6))
        for seed in range(10):
            out = apply_policy(clip, AugmentPolicy(crop_size=16), Rng(seed))
            assert out.frames.min() >= 0.0 and out.frames.max() <= 1.0

    def test_crop_larger_than_input(self):
        clip = rand_clip(Rng(0), h=16, w=16)
        with pytest.raises(InputError, match="crop_size"):
            apply_policy(clip, AugmentPolicy(crop_size=32), Rng(0))

    def test_flip_only(self):
        clip = rand_clip(Rng(0))
        policy = AugmentPolicy(crop_size=32, crop_scale=(1.0, 1.0),
                               p_gray=0.0, p_flip=1.0, p_blur=0.0, p_color=0.0)
        out = apply_policy(clip, policy, Rng(1))
        np.testing.assert_array_equal(out.frames, clip.frames[:, :, ::-1, :])


class TestJitterStart:
    def test_zero_offset(self):
        assert jitter_start(5, 0, 10, Rng(0)) == 5

    def test_clamped_to_range(self):
        rng = Rng(1)
        for _ in range(50):
            s = jitter_start(0, 4, 10, rng)
            assert 0 <= s <= 4

    def test_offset_within_bounds(self):
        rng = Rng(2)
        starts = {jitter_start(8, 2, 100, rng) for _ in range(200)}
        assert starts == {6, 7, 8, 9, 10}


class TestGroupShuffle:
    def test_identity(self):
        clip = rand_clip(Rng(0), t=8)
        perm = GroupPermutation(2, (0, 1, 2, 3))
        np.testing.assert_array_equal(group_shuffle(clip, perm).frames, clip.frames)

    def test_swap_two_groups(self):
        clip = rand_clip(Rng(0), t=4, h=4, w=4)
        out = group_shuffle(clip, GroupPermutation(2, (1, 0)))
        np.testing.assert_array_equal(out.frames, clip.frames[[2, 3, 0, 1]])

    def test_perm_then_inverse_is_identity(self):
        rng = Rng(3)
        clip = rand_clip(rng, t=8, h=8, w=8)
        for _ in range(20):
            order = tuple(int(i) for i in rng.permutation(4))
            perm = GroupPermutation(2, order)
            back = group_shuffle(group_shuffle(clip, perm), perm.inverse())
            np.testing.assert_array_equal(back.frames, clip.frames)

    def test_commutes_with_per_frame_pixel_map(self):
        # grayscale before shuffling == grayscale after shuffling
        from vidcl.augment import _to_gray

        clip = rand_clip(Rng(4), t=8)
        perm = GroupPermutation(2, (2, 0, 3, 1))
        a = group_shuffle(VideoTensor(_to_gray(clip.frames), clip.fps), perm)
        b = _to_gray(group_shuffle(clip, perm).frames)
        np.testing.assert_array_equal(a.frames, b)

    def test_divisibility_error(self):
        clip = rand_clip(Rng(0), t=6)
        with pytest.raises(InputError, match="does not divide"):
            group_shuffle(clip, GroupPermutation(4, (1, 0)))

    def test_bad_order_rejected(self):
        with pytest.raises(InputError, match="not a permutation"):
            GroupPermutation(2, (0, 0, 1))


class TestSampleNegativePerms:
    def test_two_groups_single_negative(self):
        perms = sample_negative_perms(2, 1, Rng(0))
        assert perms[0].order == (1, 0)

    def test_twelve_of_twenty_three(self):
        perms = sample_negative_perms(4, 12, Rng(1))
        orders = [p.order for p in perms]
        assert len(set(orders)) == 12
        assert tuple(range(4)) not in orders

    def test_all_non_identity_available(self):
        perms = sample_negative_perms(4, 23, Rng(2))
        assert len({p.order for p in perms}) == 23

    def test_too_many_requested(self):
        with pytest.raises(InputError, match="23"):
            sample_negative_perms(4, 24, Rng(0))

    def test_never_identity_never_duplicate(self):
        rng = Rng(5)
        for trial in range(30):
            n_groups = 2 + trial % 5  # 2..6
            n_avail = math.factorial(n_groups) - 1
            n = 1 + int(rng.integers(0, min(n_avail, 10)))
            perms = sample_negative_perms(n_groups, n, rng)
            orders = [p.order for p in perms]
            assert len(set(orders)) == n
            assert tuple(range(n_groups)) not in orders

    def test_deterministic(self):
        a = [p.order for p in sample_negative_perms(4, 6, Rng(11))]
        b = [p.order for p in sample_negative_perms(4, 6, Rng(11))]
        assert a == b
