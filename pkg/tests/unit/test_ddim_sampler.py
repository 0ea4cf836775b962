"""Unit tests for DDIM sampling and noise rolling in the sampler."""

import numpy as np
import pytest
import torch

from matstack.ddim_sampler import (
    SampleCondition,
    ddim_coefficients,
    ddim_sample,
    ddim_timesteps,
)
from matstack.diffusion_process import make_schedule
from matstack.errors import ConditionError, ConfigurationError, DimensionError
from matstack.hooks.sampler_hooks import create_clean_frame_audit_hook
from matstack.material_maps import FrameMode, MaterialMask
from matstack.run_config import SamplerConfig


def damping_denoiser(x_t, prompts, t, flags):
    """Deterministic stand-in: predicts a fixed fraction of the generated frames."""
    gen = [i for i, flag in enumerate(flags) if not flag]
    return 0.3 * x_t[:, gen]


def circular_conv_denoiser(x_t, prompts, t, flags):
    """Shift-equivariant stand-in: a fixed circular stencil mixing every frame."""
    gen = [i for i, flag in enumerate(flags) if not flag]
    mixed = (
        0.4 * x_t
        + 0.2 * torch.roll(x_t, 1, dims=-2)
        + 0.1 * torch.roll(x_t, -1, dims=-3)
        + 0.05 * x_t[:, :1]
    )
    return mixed[:, gen]


@pytest.fixture
def image():
    return np.random.default_rng(0).uniform(size=(8, 8, 3))


@pytest.fixture
def schedule():
    return make_schedule("linear", 50)


# ---------------------------------------------------------------------------
# Timesteps and coefficient tables
# ---------------------------------------------------------------------------


class TestDdimTimesteps:
    def test_fifty_of_a_thousand(self):
        steps = ddim_timesteps(1000, 50)
        assert len(steps) == 50
        assert steps[0] == 999 and steps[-1] == 0
        assert np.all(np.diff(steps) < 0)

    def test_single_step(self):
        assert ddim_timesteps(1000, 1).tolist() == [999]

    def test_every_step(self):
        assert ddim_timesteps(50, 50).tolist() == list(range(49, -1, -1))

    @pytest.mark.parametrize("steps", [0, 51])
    def test_out_of_range(self, steps):
        with pytest.raises(ConfigurationError):
            ddim_timesteps(50, steps)


class TestDdimCoefficients:
    def test_deterministic_has_no_sigma(self, schedule):
        coeffs = ddim_coefficients(schedule, ddim_timesteps(50, 10), eta=0.0)
        assert np.all(coeffs.sigma == 0.0)
        assert coeffs.alpha_bar_prev[-1] == 1.0
        assert len(coeffs) == 10

    def test_eta_range(self, schedule):
        with pytest.raises(ConfigurationError):
            ddim_coefficients(schedule, [49, 0], eta=1.5)

    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    def test_full_eta_one_matches_ancestral_sampling(self, kind):
        schedule = make_schedule(kind, 200)
        coeffs = ddim_coefficients(schedule, ddim_timesteps(200, 200), eta=1.0)
        ab, ab_prev = coeffs.alpha_bar, coeffs.alpha_bar_prev
        beta = 1.0 - ab / ab_prev

        posterior_variance = beta * (1.0 - ab_prev) / (1.0 - ab)
        np.testing.assert_allclose(coeffs.sigma**2, posterior_variance, rtol=0, atol=1e-12)
        np.testing.assert_allclose(coeffs.direction**2 + coeffs.sigma**2, 1.0 - ab_prev, rtol=0, atol=1e-12)

        w_x0, w_xt = coeffs.state_weights()
        np.testing.assert_allclose(w_x0, np.sqrt(ab_prev) * beta / (1.0 - ab), rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(w_xt, np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab), rtol=1e-6, atol=1e-9)


# ---------------------------------------------------------------------------
# Conditions
# ---------------------------------------------------------------------------


class TestSampleCondition:
    def test_text_mode_rejects_image(self, image):
        with pytest.raises(ConditionError):
            SampleCondition(image=image).check(FrameMode.TEXT_ONLY)

    def test_text_mode_rejects_mask(self):
        with pytest.raises(ConditionError):
            SampleCondition(mask=MaterialMask.full(8)).check(FrameMode.TEXT_ONLY)

    def test_image_mode_requires_image(self):
        with pytest.raises(ConditionError):
            SampleCondition(prompt="oak").check(FrameMode.IMAGE_COND)

    def test_image_mode_rejects_mask(self, image):
        with pytest.raises(ConditionError):
            SampleCondition(image=image, mask=MaterialMask.full(8)).check(FrameMode.IMAGE_COND)

    def test_mask_input_requires_mask(self, image):
        with pytest.raises(ConditionError):
            SampleCondition(image=image).check(FrameMode.MASK_INPUT_ABLATION)

    def test_dual_conditioning_is_allowed(self, image):
        SampleCondition(image=image, prompt="red brick").check(FrameMode.IMAGE_COND)

    def test_mask_input_clean_frames(self, image):
        mask = MaterialMask(values=np.eye(8))
        frames = SampleCondition(image=image, mask=mask).clean_frames(FrameMode.MASK_INPUT_ABLATION, torch.float64)
        assert len(frames) == 2
        assert torch.equal(frames[1][..., 2], torch.eye(8, dtype=torch.float64))


# ---------------------------------------------------------------------------
# ddim_sample
# ---------------------------------------------------------------------------


class TestDdimSample:
    def test_single_step_oracle_recovers_x0(self, schedule):
        mode = FrameMode.TEXT_ONLY
        x0 = torch.rand(1, 6, 8, 8, 3, generator=torch.Generator().manual_seed(5), dtype=torch.float64)

        def oracle(x_t, prompts, t, flags):
            ab = schedule.alpha_bar[int(t[0])]
            return (x_t - float(np.sqrt(ab)) * x0) / float(np.sqrt(1.0 - ab))

        stack = ddim_sample(
            oracle,
            SampleCondition(prompt="anything"),
            mode,
            schedule,
            SamplerConfig(steps=1, seed=3),
            resolution=8,
            dtype=torch.float64,
        )
        assert stack.frames.shape == (6, 8, 8, 3)
        assert np.max(np.abs(stack.frames - x0[0].numpy())) < 1e-5

    def test_deterministic_runs_are_bit_identical(self, schedule, image):
        config = SamplerConfig(steps=10, eta=0.0, seed=21)
        a = ddim_sample(damping_denoiser, SampleCondition(image=image), FrameMode.IMAGE_COND, schedule, config)
        b = ddim_sample(damping_denoiser, SampleCondition(image=image), FrameMode.IMAGE_COND, schedule, config)
        assert np.array_equal(a.frames, b.frames)

    def test_seed_changes_output(self, schedule, image):
        a = ddim_sample(damping_denoiser, SampleCondition(image=image), FrameMode.IMAGE_COND, schedule, SamplerConfig(steps=5, seed=1))
        b = ddim_sample(damping_denoiser, SampleCondition(image=image), FrameMode.IMAGE_COND, schedule, SamplerConfig(steps=5, seed=2))
        assert not np.array_equal(a.frames, b.frames)

    def test_negative_seed_wraps_to_unsigned(self, schedule, image):
        condition = SampleCondition(image=image)
        config = SamplerConfig(steps=3, eta=0.5, roll=True, seed=-1)
        wrapped = SamplerConfig(steps=3, eta=0.5, roll=True, seed=2**64 - 1)

        a = ddim_sample(damping_denoiser, condition, FrameMode.IMAGE_COND, schedule, config)
        b = ddim_sample(damping_denoiser, condition, FrameMode.IMAGE_COND, schedule, wrapped)

        np.testing.assert_array_equal(a.frames, b.frames)

    def test_stochastic_runs_are_seeded(self, schedule, image):
        config = SamplerConfig(steps=10, eta=1.0, seed=4)
        a = ddim_sample(damping_denoiser, SampleCondition(image=image), FrameMode.IMAGE_COND, schedule, config)
        b = ddim_sample(damping_denoiser, SampleCondition(image=image), FrameMode.IMAGE_COND, schedule, config)
        assert np.array_equal(a.frames, b.frames)

    def test_output_is_clamped_full_stack(self, schedule, image):
        stack = ddim_sample(damping_denoiser, SampleCondition(image=image), FrameMode.IMAGE_COND, schedule, SamplerConfig(steps=4))
        assert stack.frames.shape == (7, 8, 8, 3)
        assert stack.frames.min() >= 0.0 and stack.frames.max() <= 1.0
        assert np.array_equal(stack.frames[0], image)
        stack.validate()

    def test_float64_image_selects_float64_state(self, schedule, image):
        stack = ddim_sample(damping_denoiser, SampleCondition(image=image), FrameMode.IMAGE_COND, schedule, SamplerConfig(steps=2))
        assert stack.frames.dtype == np.float64

    @pytest.mark.parametrize("roll", [False, True])
    def test_clean_frames_are_intact_at_every_step(self, schedule, image, roll):
        hook = create_clean_frame_audit_hook(raise_on_violation=True)
        mask = MaterialMask(values=(np.random.default_rng(1).uniform(size=(8, 8)) > 0.5).astype(np.float64))
        ddim_sample(
            circular_conv_denoiser,
            SampleCondition(image=image, mask=mask),
            FrameMode.MASK_INPUT_ABLATION,
            schedule,
            SamplerConfig(steps=6, roll=roll, seed=9),
            step_hook=hook,
        )
        assert hook.audit.steps_checked == 6
        assert hook.audit.ok

    def test_hook_sees_every_step_in_order(self, schedule, image):
        calls = []

        def recording_hook(original_func, action, step_index, **kwargs):
            calls.append((action, step_index, int(kwargs["t"][0]), kwargs["offset"]))
            return original_func(kwargs["x_t"], kwargs["t"])

        ddim_sample(damping_denoiser, SampleCondition(image=image), FrameMode.IMAGE_COND, schedule, SamplerConfig(steps=3), step_hook=recording_hook)
        assert calls == [("denoise", 0, 49, (0, 0)), ("denoise", 1, 24, (0, 0)), ("denoise", 2, 0, (0, 0))]

    def test_roll_offsets_respect_the_maximum(self, schedule, image):
        offsets = []

        def recording_hook(original_func, action, step_index, **kwargs):
            offsets.append(kwargs["offset"])
            return original_func(kwargs["x_t"], kwargs["t"])

        config = SamplerConfig(steps=20, roll=True, roll_max_offset=3, seed=2)
        ddim_sample(damping_denoiser, SampleCondition(image=image), FrameMode.IMAGE_COND, schedule, config, step_hook=recording_hook)
        assert all(0 <= dy < 3 and 0 <= dx < 3 for dy, dx in offsets)
        assert len(set(offsets)) > 1

    @pytest.mark.parametrize("eta", [0.0, 0.7])
    def test_rolling_commutes_with_shift_equivariant_denoiser(self, schedule, image, eta):
        rolled = ddim_sample(circular_conv_denoiser, SampleCondition(image=image), FrameMode.IMAGE_COND, schedule, SamplerConfig(steps=8, eta=eta, roll=True, seed=6))
        plain = ddim_sample(circular_conv_denoiser, SampleCondition(image=image), FrameMode.IMAGE_COND, schedule, SamplerConfig(steps=8, eta=eta, roll=False, seed=6))
        assert np.array_equal(rolled.frames, plain.frames)

    def test_resolution_from_denoiser_config(self, schedule, tiny_model_config):
        class Stub:
            config = tiny_model_config

            def __call__(self, x_t, prompts, t, flags):
                return torch.zeros_like(x_t)

        stack = ddim_sample(Stub(), SampleCondition(prompt="x"), FrameMode.TEXT_ONLY, schedule, SamplerConfig(steps=2))
        assert stack.frames.shape == (6, 16, 16, 3)

    def test_unknown_resolution(self, schedule):
        with pytest.raises(DimensionError):
            ddim_sample(damping_denoiser, SampleCondition(), FrameMode.TEXT_ONLY, schedule, SamplerConfig(steps=2))

    def test_image_resolution_conflict(self, schedule, image):
        with pytest.raises(DimensionError):
            ddim_sample(damping_denoiser, SampleCondition(image=image), FrameMode.IMAGE_COND, schedule, SamplerConfig(steps=2), resolution=16)

    def test_missing_condition(self, schedule):
        with pytest.raises(ConditionError):
            ddim_sample(damping_denoiser, SampleCondition(), FrameMode.IMAGE_COND, schedule, SamplerConfig(steps=2))
