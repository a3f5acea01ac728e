"""Motion field, Sobel edge map, window profiling, and targeted sampling."""

import math

import numpy as np
import pytest

from vidcl.core import InputError, Rng, VideoTensor
from vidcl.motion import (
    default_top_k,
    edge_map,
    motion_magnitude_field,
    profile,
    sample_window,
    softmax_weights,
)


def scalar_softmax(m, beta):
    """Independent oracle: e^{m_i/beta} / sum_j e^{m_j/beta} via math.exp."""
    e = [math.exp(x / beta) for x in m]
    s = sum(e)
    return [x / s for x in e]


def video(frames, fps=8.0):
    return VideoTensor(np.asarray(frames, dtype=np.float32), fps=fps)


class TestMotionMagnitudeField:
    def test_static_video_all_zero(self):
        v = video(np.full((4, 6, 6, 3), 0.5))
        np.testing.assert_array_equal(motion_magnitude_field(v), 0.0)

    def test_single_pixel_flip(self):
        frames = np.zeros((2, 5, 5, 1), dtype=np.float32)
        frames[1, 2, 3, 0] = 1.0
        fld = motion_magnitude_field(video(frames))
        assert fld[0, 2, 3] == 1.0
        assert fld.sum() == 1.0

    def test_three_frame_ramp(self):
        # frames at 0, 0.25, 0.75 -> field values 0.25 then 0.5
        frames = np.stack([np.full((4, 4, 3), v, dtype=np.float32) for v in (0.0, 0.25, 0.75)])
        fld = motion_magnitude_field(video(frames))
        np.testing.assert_allclose(fld[0], 0.25, rtol=0, atol=0)
        np.testing.assert_allclose(fld[1], 0.5, rtol=0, atol=0)

    def test_channel_mean(self):
        frames = np.zeros((2, 3, 3, 3), dtype=np.float32)
        frames[1, 1, 1] = [0.3, 0.6, 0.9]
        fld = motion_magnitude_field(video(frames))
        np.testing.assert_allclose(fld[0, 1, 1], 0.6, rtol=1e-6)

    def test_requires_two_frames(self):
        with pytest.raises(InputError, match="two frames"):
            motion_magnitude_field(video(np.zeros((1, 4, 4, 1))))

    def test_range(self):
        rng = Rng(0)
        frames = rng.uniform(size=(5, 8, 8, 3)).astype(np.float32)
        fld = motion_magnitude_field(video(frames))
        assert fld.min() >= 0.0 and fld.max() <= 1.0


class TestEdgeMap:
    def test_constant_field_zero(self):
        np.testing.assert_array_equal(edge_map(np.full((5, 7), 0.3)), 0.0)

    def test_vertical_step_edge(self):
        # hand-convolved oracle on a 5x5 step: columns adjacent to the edge
        # see |Gx| = 1+2+1 = 4, Gy = 0 everywhere
        fld = np.zeros((5, 5))
        fld[:, 3:] = 1.0
        em = edge_map(fld)
        np.testing.assert_allclose(em[:, 2], 4.0)
        np.testing.assert_allclose(em[:, 3], 4.0)
        np.testing.assert_allclose(em[:, 0], 0.0)
        np.testing.assert_allclose(em[:, 1], 0.0)
        np.testing.assert_allclose(em[:, 4], 0.0)

    def test_rotation_equivariance(self):
        rng = Rng(1)
        # dyadic values keep the arithmetic exact under rotation
        fld = np.round(rng.uniform(size=(9, 9)) * 256) / 256
        np.testing.assert_allclose(edge_map(np.rot90(fld)), np.rot90(edge_map(fld)), atol=1e-12)

    def test_too_small(self):
        with pytest.raises(InputError, match="3x3"):
            edge_map(np.zeros((2, 5)))


class TestSoftmaxWeights:
    def test_worked_example(self):
        # m = [1, 2, 3], beta = 5: oracle gives [0.269307, 0.328933, 0.401760]
        expected = scalar_softmax([1.0, 2.0, 3.0], 5.0)
        np.testing.assert_allclose(expected, [0.2693, 0.3290, 0.4017], atol=1e-4)
        np.testing.assert_allclose(softmax_weights(np.array([1.0, 2.0, 3.0]), 5.0),
                                   expected, rtol=1e-12)

    def test_shift_invariance_exact(self):
        m = np.array([1.0, 2.0, 3.0])
        p = softmax_weights(m, 5.0)
        p_shift = softmax_weights(m + 7.0, 5.0)
        np.testing.assert_array_equal(p, p_shift)  # bitwise

    def test_shift_invariance_random(self):
        rng = Rng(2)
        for _ in range(20):
            m = rng.uniform(0, 3, size=5)
            c = rng.uniform(-10, 10)
            np.testing.assert_allclose(
                softmax_weights(m, 2.0), softmax_weights(m + c, 2.0), rtol=1e-12
            )

    def test_beta_inf_uniform_exact(self):
        p = softmax_weights(np.array([0.1, 5.0, 2.0, 3.3]), math.inf)
        np.testing.assert_array_equal(p, 0.25)

    def test_entropy_grows_with_beta(self):
        m = np.array([0.2, 1.0, 4.0])

        def entropy(p):
            return -(p * np.log(p)).sum()

        betas = [0.5, 1.0, 5.0, 50.0]
        ents = [entropy(softmax_weights(m, b)) for b in betas]
        assert all(a <= b + 1e-12 for a, b in zip(ents, ents[1:]))

    def test_sums_to_one(self):
        rng = Rng(3)
        for _ in range(50):
            p = softmax_weights(rng.uniform(0, 10, size=7), float(rng.uniform(0.5, 20)))
            assert abs(p.sum() - 1.0) < 1e-9
            assert (p > 0).all()


class TestProfile:
    def _static_video(self, t=16):
        return video(np.full((t, 8, 8, 3), 0.4))

    def _two_window_video(self):
        # window 0 static, window 1 has a moving pixel block
        frames = np.full((16, 8, 8, 3), 0.2, dtype=np.float32)
        for t in range(8, 16):
            frames[t, (t - 8) % 8, :, :] = 0.9
        return video(frames)

    def test_static_uniform(self):
        prof = profile(self._static_video(), beta=5.0)
        np.testing.assert_array_equal(prof.amplitudes, 0.0)
        np.testing.assert_array_equal(prof.probabilities, 0.5)

    def test_moving_window_preferred(self):
        prof = profile(self._two_window_video(), beta=5.0)
        assert prof.amplitudes[1] > prof.amplitudes[0]
        assert prof.probabilities[1] > prof.probabilities[0]

    def test_deterministic(self):
        v = self._two_window_video()
        a, b = profile(v), profile(v)
        np.testing.assert_array_equal(a.amplitudes, b.amplitudes)
        np.testing.assert_array_equal(a.probabilities, b.probabilities)

    def test_top_k_clamped_with_warning(self):
        prof = profile(self._two_window_video(), top_k=10_000)
        assert prof.warnings and "clamped" in prof.warnings[0]

    def test_needs_full_window(self):
        with pytest.raises(InputError, match="full window"):
            profile(video(np.zeros((4, 8, 8, 3)), fps=8.0))

    def test_default_top_k_scaling(self):
        assert default_top_k(224, 224) == 4000
        assert default_top_k(32, 32) == max(1, round(4000 * 1024 / 224**2))


class TestSampleWindow:
    def test_single_window_always_zero(self):
        prof = profile(video(np.zeros((8, 8, 8, 3)), fps=8.0))
        rng = Rng(0)
        assert all(sample_window(prof, rng) == 0 for _ in range(100))

    @pytest.mark.parametrize("p", [
        np.full(4, 0.25),
        np.array(scalar_softmax([1.0, 2.0, 3.0], 5.0)),
    ])
    def test_empirical_frequencies_within_3_sigma(self, p):
        from vidcl.motion import MotionProfile

        prof = MotionProfile(amplitudes=np.zeros(len(p)), probabilities=p, beta_used=5.0)
        rng = Rng(1234)
        n = 100_000
        counts = np.bincount([sample_window(prof, rng) for _ in range(n)], minlength=len(p))
        freq = counts / n
        sigma = np.sqrt(p * (1 - p) / n)
        assert (np.abs(freq - p) <= 3 * sigma).all(), (freq, p)

    def test_deterministic_given_state(self):
        p = np.array([0.3, 0.7])
        from vidcl.motion import MotionProfile

        prof = MotionProfile(np.zeros(2), p, 5.0)
        a = [sample_window(prof, Rng(9)) for _ in range(10)]
        b = [sample_window(prof, Rng(9)) for _ in range(10)]
        assert a == b
