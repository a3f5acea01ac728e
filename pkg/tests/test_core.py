"""Config schema, serialization round-trips, and deterministic RNG."""

import dataclasses
import math

import numpy as np
import pytest

from vidcl.core import (
    ClipSpec,
    Config,
    InputError,
    Rng,
    VideoTensor,
    config_from_text,
    config_hash,
    config_to_text,
    validate_config,
)


class TestValidateConfig:
    def test_defaults_are_valid(self):
        assert validate_config(Config()) == []

    def test_zero_tau(self):
        assert validate_config(Config(tau=0.0)) == ["tau must be > 0"]

    def test_group_size_must_divide_clip_len(self):
        # 16 mod 3 != 0
        bad = validate_config(Config(clip_len=16, group_size=3))
        assert any("group_size" in v for v in bad)

    def test_infinite_beta_is_valid(self):
        assert validate_config(Config(beta=math.inf)) == []

    def test_negative_beta(self):
        assert any("beta" in v for v in validate_config(Config(beta=-1.0)))

    def test_ema_momentum_range(self):
        assert validate_config(Config(ema_momentum=1.0)) == []
        assert any("ema_momentum" in v for v in validate_config(Config(ema_momentum=1.5)))

    def test_temporal_kernel_domain(self):
        assert any("temporal_kernel" in v for v in validate_config(Config(temporal_kernel=4)))

    def test_violations_accumulate(self):
        bad = validate_config(Config(tau=-1, bank_size=0, pooling_mode="MAX"))
        assert len(bad) == 3


class TestConfigSerialization:
    def test_round_trip_defaults(self):
        cfg = Config()
        assert config_from_text(config_to_text(cfg)) == cfg

    def test_round_trip_modified(self):
        cfg = Config(tau=0.07, beta=math.inf, objective="cvrl", seed=123,
                     lambda_weight=0.5, heads_mode="shared")
        assert config_from_text(config_to_text(cfg)) == cfg

    def test_unknown_key_fails_closed(self):
        text = config_to_text(Config()) + "mystery_knob = 3\n"
        with pytest.raises(InputError, match="unknown config key"):
            config_from_text(text)

    def test_bad_value_reports_line(self):
        with pytest.raises(InputError, match="line 1"):
            config_from_text("tau = not_a_number\n")

    def test_comments_and_blanks_ignored(self):
        cfg = config_from_text("# comment\n\ntau = 0.2\n")
        assert cfg.tau == 0.2

    def test_hash_stable_and_sensitive(self):
        assert config_hash(Config()) == config_hash(Config())
        assert config_hash(Config()) != config_hash(Config(seed=1))


class TestRng:
    def test_same_seed_same_draws(self):
        a, b = Rng(42), Rng(42)
        np.testing.assert_array_equal(a.uniform(size=10_000), b.uniform(size=10_000))

    def test_different_seed_differs(self):
        assert not np.array_equal(Rng(0).uniform(size=100), Rng(1).uniform(size=100))

    def test_fork_deterministic(self):
        a, b = Rng(7), Rng(7)
        fa, fb = a.fork(), b.fork()
        np.testing.assert_array_equal(fa.normal(size=100), fb.normal(size=100))

    def test_fork_independent_of_parent_use_after(self):
        a = Rng(7)
        child = a.fork()
        first = child.uniform(size=5)
        a.uniform(size=50)  # parent use after fork must not affect the child
        b = Rng(7)
        np.testing.assert_array_equal(b.fork().uniform(size=5), first)

    def test_state_round_trip(self):
        a = Rng(3)
        a.uniform(size=17)
        b = Rng.from_state(a.get_state())
        np.testing.assert_array_equal(a.uniform(size=100), b.uniform(size=100))

    def test_choice_p_deterministic(self):
        p = np.array([0.1, 0.2, 0.7])
        draws_a = [Rng(5).choice_p(p) for _ in range(1)]
        draws_b = [Rng(5).choice_p(p) for _ in range(1)]
        assert draws_a == draws_b


class TestVideoTensor:
    def test_valid(self):
        v = VideoTensor(np.zeros((4, 8, 8, 3), dtype=np.float32), fps=8.0)
        assert v.violations() == []
        assert (v.t, v.h, v.w, v.ch) == (4, 8, 8, 3)

    def test_bad_channels(self):
        v = VideoTensor(np.zeros((4, 8, 8, 2), dtype=np.float32))
        assert any("Ch" in s for s in v.violations())

    def test_out_of_range_values(self):
        v = VideoTensor(np.full((2, 4, 4, 1), 1.5, dtype=np.float32))
        assert any("[0, 1]" in s for s in v.violations())

    def test_non_finite(self):
        frames = np.zeros((2, 4, 4, 1), dtype=np.float32)
        frames[0, 0, 0, 0] = np.nan
        assert any("finite" in s for s in VideoTensor(frames).violations())


class TestClipSpec:
    def test_defaults(self):
        spec = ClipSpec("v", 0)
        assert (spec.length, spec.stride) == (16, 4)

    def test_overrun_detected(self):
        spec = ClipSpec("v", start_frame=4, length=16, stride=4)
        # last frame index 4 + 15*4 = 64
        assert spec.violations(source_length=64)
        assert not spec.violations(source_length=65)

    def test_negative_start(self):
        assert ClipSpec("v", -1).violations()
