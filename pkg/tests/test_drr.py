# tests/test_drr.py
import numpy as np
import pytest

import tumor_shared as ts
from dataset import build_training_set
from drr import (
    CropBox, DrrFrame, FrameRenderer, OpticalDepthMap, add_noise, crop, crop_box_for, normalize01,
    project_coronal, render_frame, resample,
)
from phantom import AttenuationVolume, deform, translate
from tumor_shared import DegenerateInputError, GeometryError, ParameterError


def _slab(mu_by_y, thickness_mm, nx=4, nz=3):
    ny = len(mu_by_y)
    values = np.broadcast_to(np.asarray(mu_by_y, dtype=np.float64)[None, :, None], (nx, ny, nz)).copy()
    return AttenuationVolume(dims=(nx, ny, nz), spacing=(1.0, thickness_mm / ny, 2.0),
                             origin=(0.0, 0.0, 0.0), values=values)


@pytest.mark.parametrize("mu,length", [
    (0.0, 10.0), (0.001, 50.0), (0.002, 300.0), (0.01, 20.0), (0.019, 100.0),
    (0.02, 250.0), (0.05, 40.0), (0.1, 5.0), (0.2, 12.5), (0.5, 3.0),
])
def test_homogeneous_slab_transmission(mu, length):
    frame = project_coronal(_slab([mu] * 10, length))
    assert frame.values.shape == (3, 4)
    assert np.allclose(frame.values, np.exp(-mu * length), rtol=0, atol=1e-6)


def test_slab_splitting_is_multiplicative():
    mu1, mu2, half = 0.02, 0.005, 60.0
    both = project_coronal(_slab([mu1] * 6 + [mu2] * 6, 2 * half)).values
    one = project_coronal(_slab([mu1] * 6, half)).values
    two = project_coronal(_slab([mu2] * 6, half)).values
    assert np.allclose(both, one * two, rtol=0, atol=1e-9)


def test_frame_axes_are_z_rows_x_cols(small_phantom):
    vol = small_phantom.reference_volume
    frame = project_coronal(vol)
    assert frame.values.shape == (vol.dims[2], vol.dims[0])
    assert frame.origin == (vol.origin[2], vol.origin[0])
    assert np.all((frame.values > 0) & (frame.values <= 1))


def test_normalize01_range_and_idempotence():
    rng = np.random.default_rng(0)
    frame = DrrFrame(values=rng.random((5, 7)) * 3 + 1, pixel_spacing=(1.0, 1.0), origin=(0.0, 0.0))
    once = normalize01(frame)
    twice = normalize01(once)
    assert once.values.min() == 0.0 and once.values.max() == 1.0
    assert np.array_equal(once.values, twice.values)


def test_normalize01_constant_frame_is_degenerate():
    frame = DrrFrame(values=np.full((4, 4), 0.3), pixel_spacing=(1.0, 1.0), origin=(0.0, 0.0))
    with pytest.raises(DegenerateInputError):
        normalize01(frame)


def test_crop_inside_and_zero_padding():
    values = np.arange(100, dtype=np.float64).reshape(10, 10) + 1
    frame = DrrFrame(values=values, pixel_spacing=(1.0, 1.0), origin=(0.0, 0.0))
    inner = crop(frame, CropBox(center=(4.5, 4.5), extent=(2.0, 3.0)))
    assert inner.values.shape == (6, 4)
    assert np.array_equal(inner.values, values[2:8, 3:7])
    edge = crop(frame, CropBox(center=(0.0, 0.0), extent=(2.0, 2.0)))
    assert edge.values.shape == (4, 4)
    assert np.all(edge.values[:2, :] == 0) and np.all(edge.values[:, :2] == 0)
    assert np.array_equal(edge.values[2:, 2:], values[:2, :2])


def test_crop_outside_frame_is_geometry_error():
    frame = DrrFrame(values=np.ones((10, 10)), pixel_spacing=(1.0, 1.0), origin=(0.0, 0.0))
    with pytest.raises(GeometryError):
        crop(frame, CropBox(center=(100.0, 100.0), extent=(2.0, 2.0)))
    with pytest.raises(GeometryError):
        CropBox(center=(0.0, 0.0), extent=(0.0, 1.0))


def test_resample_identity_and_range():
    rng = np.random.default_rng(1)
    frame = DrrFrame(values=rng.random((30, 20)), pixel_spacing=(2.0, 3.0), origin=(0.0, 0.0))
    assert resample(frame, (30, 20)) is frame
    out = resample(frame, (64, 64))
    assert out.values.shape == (64, 64)
    assert out.values.min() >= frame.values.min() and out.values.max() <= frame.values.max()
    with pytest.raises(ParameterError):
        resample(frame, (0, 64))


def test_fast_renderer_matches_exact_projection(small_phantom):
    """Integer-voxel setup shift keeps the exact path to one interpolation per axis."""
    ph = small_phantom
    d, shift = -8.0, np.array([5.0, 0.0, -5.0])
    exact = project_coronal(translate(deform(ph, d), shift)).values
    fast = OpticalDepthMap(ph).frame(d, shift).values
    assert np.allclose(fast, exact, rtol=0, atol=1e-6)


def test_rendered_frame_is_pipeline_ready(small_phantom):
    frame = render_frame(small_phantom, -4.0, timestamp_s=0.4)
    assert frame.values.shape == (64, 64)
    assert frame.values.min() == 0.0 and frame.values.max() == 1.0
    assert frame.timestamp_s == 0.4


def test_rendered_frames_follow_motion(small_phantom):
    r = FrameRenderer(small_phantom, crop_box_for(small_phantom))
    assert not np.array_equal(r.render(0.0).values, r.render(-10.0).values)
    assert np.array_equal(r.render(-3.0).values, r.render(-3.0).values)


def test_unknown_render_mode(small_phantom):
    with pytest.raises(ParameterError):
        FrameRenderer(small_phantom, crop_box_for(small_phantom), mode="cone-beam")


def test_more_attenuation_never_brightens(small_phantom):
    vol = small_phantom.reference_volume
    values = vol.values.copy()
    values[20:28, :, 20:28] += 0.01
    denser = AttenuationVolume(dims=vol.dims, spacing=vol.spacing, origin=vol.origin, values=values)
    assert np.all(project_coronal(denser).values <= project_coronal(vol).values)


def test_crop_extent_arithmetic():
    frame = DrrFrame(values=np.ones((300, 300)), pixel_spacing=(2.0, 2.0), origin=(-299.0, -299.0))
    out = crop(frame, CropBox(center=(0.0, 0.0), extent=(100.0, 50.0)))
    assert out.values.shape == (50, 100)
    full = crop(frame, CropBox(center=(0.0, 0.0), extent=(300.0, 300.0)))
    assert np.array_equal(full.values, frame.values)


def test_normalize01_example():
    frame = DrrFrame(values=np.array([[2.0, 4.0, 6.0]]), pixel_spacing=(1.0, 1.0), origin=(0.0, 0.0))
    assert np.array_equal(normalize01(frame).values, [[0.0, 0.5, 1.0]])


def test_resample_constant_and_checkerboard():
    const = DrrFrame(values=np.full((20, 30), 0.7), pixel_spacing=(1.0, 1.0), origin=(0.0, 0.0))
    assert np.allclose(resample(const, (64, 64)).values, 0.7, rtol=0, atol=1e-15)
    board = np.indices((128, 128)).sum(axis=0) % 2 * 1.0
    out = resample(DrrFrame(values=board, pixel_spacing=(1.0, 1.0), origin=(0.0, 0.0)), (64, 64)).values
    assert out.shape == (64, 64) and out.min() >= 0.0 and out.max() <= 1.0


def test_add_noise_is_seeded_and_non_negative(small_phantom):
    raw = project_coronal(small_phantom.reference_volume)
    a = add_noise(raw, 0.05, np.random.default_rng(3))
    b = add_noise(raw, 0.05, np.random.default_rng(3))
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, add_noise(raw, 0.05, np.random.default_rng(4)).values)
    assert a.values.min() >= 0.0 and a.values.shape == raw.values.shape
    assert add_noise(raw, 0.0, np.random.default_rng(3)) is raw


def test_noisy_renderer_stays_normalized_and_reproducible(small_phantom):
    box = crop_box_for(small_phantom)
    noisy = FrameRenderer(small_phantom, box, noise_sd=0.05)
    a = noisy.render(-3.0, rng=np.random.default_rng(7)).values
    b = noisy.render(-3.0, rng=np.random.default_rng(7)).values
    assert np.array_equal(a, b)
    assert a.min() == 0.0 and a.max() == 1.0
    assert not np.array_equal(a, FrameRenderer(small_phantom, box).render(-3.0).values)


def test_zero_noise_matches_noiseless_path(small_phantom):
    box = crop_box_for(small_phantom)
    quiet = FrameRenderer(small_phantom, box, noise_sd=0.0).render(-3.0, rng=np.random.default_rng(7))
    assert np.array_equal(quiet.values, FrameRenderer(small_phantom, box).render(-3.0).values)


def test_training_frames_pick_up_configured_noise(small_phantom, monkeypatch):
    clean = build_training_set(small_phantom, 22, seed=0)
    monkeypatch.setattr(ts, "_run_settings", ts.Settings(drr_noise_sd=0.02))
    first = build_training_set(small_phantom, 22, seed=0)
    second = build_training_set(small_phantom, 22, seed=0)
    assert first.equals(second)
    assert not np.array_equal(first.samples[0].frames, clean.samples[0].frames)
    assert all(0.0 <= s.frames.min() and s.frames.max() <= 1.0 for s in first.samples)
