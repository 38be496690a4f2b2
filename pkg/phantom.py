# phantom.py
"""Synthetic breathing thorax phantoms.

A phantom is a parametric attenuation volume (elliptic thorax, two lungs, rib bands and
an ellipsoidal tumor) plus a separable motion model D(r, t) = s(t) * w(z) * u, where s is
a breathing trace, w an axial weight ramp and u a unit direction.
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.ndimage import map_coordinates

from tumor_shared import FRAME_RATE_HZ, GeometryError, ParameterError, stable_hash

Vec3 = Tuple[float, float, float]

# drift horizon covered by the rigid-motion plateau
DRIFT_HORIZON_S = 600.0


# --- Models ---
class BreathingParams(BaseModel):
    amplitude_mm: float = 10.0
    period_s: float = 4.0
    shape_exponent: int = 2
    phase_rad: float = 0.0
    amplitude_jitter_sd: float = 0.0
    period_jitter_sd: float = 0.0
    drift_mm_per_min: float = 0.0


class PhantomSpec(BaseModel):
    dims: Tuple[int, int, int] = (128, 128, 128)
    spacing_mm: Vec3 = (2.0, 2.0, 2.0)
    body_semi_axes_mm: Vec3 = (115.0, 80.0, 220.0)
    lung_offset_x_mm: float = 55.0
    lung_semi_axes_mm: Vec3 = (38.0, 55.0, 85.0)
    lung_center_z_mm: float = 10.0
    # relative to the volume centre; negative x is the patient's right lung
    tumor_center_mm: Vec3 = (-55.0, 5.0, -20.0)
    tumor_semi_axes_mm: Vec3 = (10.0, 10.0, 10.0)
    rib_period_mm: float = 24.0
    rib_width_mm: float = 8.0
    rib_thickness_mm: float = 10.0
    mu_body: float = 0.02
    mu_lung: float = 0.002
    mu_tumor: float = 0.018
    mu_bone: float = 0.048
    motion_direction: Vec3 = (0.0, 0.316, 0.949)
    apex_weight: float = 0.3
    ramp_length_mm: float = 60.0
    breathing: BreathingParams = BreathingParams()


# --- Domain types ---
@dataclass(frozen=True, eq=False)
class AttenuationVolume:
    dims: Tuple[int, int, int]
    spacing: Vec3
    origin: Vec3
    values: np.ndarray  # mm^-1, indexed [x, y, z]

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ParameterError(f"volume dims must be >= 1 per axis, got {self.dims}")
        if min(self.spacing) <= 0:
            raise ParameterError(f"volume spacing must be > 0, got {self.spacing}")
        if tuple(self.values.shape) != tuple(self.dims):
            raise ParameterError(f"values shape {self.values.shape} != dims {self.dims}")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ParameterError("attenuation values must be finite and >= 0")
        self.values.flags.writeable = False

    def axis_mm(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]

    def equals(self, other: "AttenuationVolume") -> bool:
        return (self.dims == other.dims and self.spacing == other.spacing
                and self.origin == other.origin and np.array_equal(self.values, other.values))


@dataclass(frozen=True)
class BreathingSignal:
    samples: np.ndarray
    rate_hz: float = FRAME_RATE_HZ

    @property
    def length(self) -> int:
        return int(self.samples.shape[0])

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.length) / self.rate_hz


@dataclass(frozen=True, eq=False)
class PatientPhantom:
    patient_id: str
    spec: PhantomSpec
    seed: int
    reference_volume: AttenuationVolume
    gtv_mask: np.ndarray
    motion_direction: np.ndarray
    breathing_params: BreathingParams
    amplitudes: np.ndarray
    p_ref: np.ndarray
    weight_hold_z_mm: float
    rigid_excursion_mm: float = 0.0
    session: str = "T1"

    def weight_at(self, z_mm) -> np.ndarray:
        """Axial weight ramp: 1 up to the hold height, raised-cosine decay above."""
        z = np.asarray(z_mm, dtype=np.float64)
        apex, ramp = self.spec.apex_weight, self.spec.ramp_length_mm
        frac = np.clip((z - self.weight_hold_z_mm) / ramp, 0.0, 1.0)
        ramped = apex + (1.0 - apex) * 0.5 * (1.0 + np.cos(math.pi * frac))
        return np.where(frac <= 0.0, 1.0, ramped)

    @property
    def weight_profile_z(self) -> np.ndarray:
        return self.weight_at(self.reference_volume.axis_mm(2))

    @property
    def motion_weight_field(self) -> np.ndarray:
        w = self.weight_profile_z
        return np.broadcast_to(w[None, None, :], self.reference_volume.dims)

    def spec_hash(self) -> str:
        return stable_hash({"spec": self.spec.model_dump(), "seed": self.seed})

    def gtv_volume_ml(self) -> float:
        sx, sy, sz = self.reference_volume.spacing
        return float(self.gtv_mask.sum()) * sx * sy * sz / 1000.0

    def same_anatomy(self, other: "PatientPhantom") -> bool:
        return (self.patient_id == other.patient_id
                and self.spec == other.spec
                and self.reference_volume.equals(other.reference_volume)
                and np.array_equal(self.gtv_mask, other.gtv_mask)
                and np.array_equal(self.motion_direction, other.motion_direction)
                and np.array_equal(self.amplitudes, other.amplitudes))


# --- Generation ---
def _voxel_grid(dims, spacing, origin):
    axes = [origin[i] + np.arange(dims[i]) * spacing[i] for i in range(3)]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(x, y, z, center, semi):
    return (((x - center[0]) / semi[0]) ** 2 + ((y - center[1]) / semi[1]) ** 2
            + ((z - center[2]) / semi[2]) ** 2) <= 1.0


def upward_excursion_mm(params: BreathingParams, direction: np.ndarray) -> float:
    """Bound on how far the trace can lift the GTV along z (3 SD of amplitude jitter)."""
    amp = params.amplitude_mm * (1.0 + 3.0 * params.amplitude_jitter_sd)
    drift = abs(params.drift_mm_per_min) * DRIFT_HORIZON_S / 60.0
    return float(abs(direction[2]) * (amp + drift))


def generate_phantom(spec: PhantomSpec, seed: int, patient_id: str = "P000") -> PatientPhantom:
    if min(spec.spacing_mm) <= 0:
        raise ParameterError(f"spacing must be > 0, got {spec.spacing_mm}")
    if min(spec.dims) < 1:
        raise ParameterError(f"dims must be >= 1, got {spec.dims}")
    levels = (spec.mu_body, spec.mu_lung, spec.mu_tumor, spec.mu_bone)
    if min(levels) < 0:
        raise ParameterError(f"attenuation levels must be >= 0, got {levels}")
    if min(spec.tumor_semi_axes_mm) <= 0:
        raise GeometryError("tumor radius must be > 0 (empty GTV)")
    if not 0.0 <= spec.apex_weight <= 1.0 or spec.ramp_length_mm <= 0:
        raise ParameterError("apex_weight must be in [0, 1] and ramp_length_mm > 0")
    direction = np.asarray(spec.motion_direction, dtype=np.float64)
    norm = float(np.linalg.norm(direction))
    if norm == 0.0 or not np.isfinite(norm):
        raise ParameterError("motion_direction must be a finite non-zero vector")
    direction = direction / norm

    dims = tuple(int(d) for d in spec.dims)
    spacing = tuple(float(s) for s in spec.spacing_mm)
    origin = tuple(-(dims[i] - 1) * spacing[i] / 2.0 for i in range(3))
    lo = np.array(origin)
    hi = lo + (np.array(dims) - 1) * np.array(spacing)
    tc = np.array(spec.tumor_center_mm)
    ts = np.array(spec.tumor_semi_axes_mm)
    if np.any(tc - ts < lo) or np.any(tc + ts > hi):
        raise GeometryError(f"tumor at {tuple(tc)} +/- {tuple(ts)} leaves the volume bounds")

    rng = np.random.default_rng(seed)
    x, y, z = _voxel_grid(dims, spacing, origin)
    body = _ellipsoid(x, y, z, (0.0, 0.0, 0.0), spec.body_semi_axes_mm)
    lz = spec.lung_center_z_mm
    lungs = (_ellipsoid(x, y, z, (-spec.lung_offset_x_mm, 0.0, lz), spec.lung_semi_axes_mm)
             | _ellipsoid(x, y, z, (spec.lung_offset_x_mm, 0.0, lz), spec.lung_semi_axes_mm)) & body
    a, b, _ = spec.body_semi_axes_mm
    t = spec.rib_thickness_mm
    inner = ((x / max(a - t, 1e-6)) ** 2 + (y / max(b - t, 1e-6)) ** 2) > 1.0
    rib_phase = rng.uniform(0.0, spec.rib_period_mm)
    bands = np.mod(z - rib_phase, spec.rib_period_mm) < spec.rib_width_mm
    ribs = body & inner & bands & ~lungs
    gtv = _ellipsoid(x, y, z, tuple(tc), tuple(ts))
    if not gtv.any():
        raise GeometryError("tumor covers no voxel centre (empty GTV)")
    if np.any(gtv & ~lungs):
        raise GeometryError("tumor is not fully inside the lung region")

    values = np.zeros(dims, dtype=np.float64)
    values[body] = spec.mu_body
    values[lungs] = spec.mu_lung
    values[ribs] = spec.mu_bone
    values[gtv] = spec.mu_tumor
    volume = AttenuationVolume(dims=dims, spacing=spacing, origin=origin, values=values)

    idx = np.argwhere(gtv)
    p_ref = lo + idx.mean(axis=0) * np.array(spacing)
    # the plateau covers the GTV top, one voxel of interpolation support and the
    # largest upward excursion, so the GTV stays in w = 1 and moves rigidly
    excursion = upward_excursion_mm(spec.breathing, direction)
    hold_z = float(lo[2] + idx[:, 2].max() * spacing[2]) + spacing[2] + excursion
    amplitudes = spec.breathing.amplitude_mm * np.abs(direction)
    gtv.flags.writeable = False

    return PatientPhantom(
        patient_id=patient_id, spec=spec, seed=seed, reference_volume=volume,
        gtv_mask=gtv, motion_direction=direction, breathing_params=spec.breathing,
        amplitudes=amplitudes, p_ref=p_ref, weight_hold_z_mm=hold_z, rigid_excursion_mm=excursion,
    )


# --- Breathing ---
def sample_breathing(params: BreathingParams, n_points: int, rate_hz: float = FRAME_RATE_HZ,
                     seed: int = 0) -> BreathingSignal:
    """s(t) = b(t) - A_c * cos^(2n)(theta(t)), theta advancing by pi per cycle.

    Cycles start at end-exhale (cos term zero) so per-cycle jitter of A and tau keeps the
    trace continuous. Without jitter theta(t) = pi * t / tau + phi.
    """
    if n_points < 1:
        raise ParameterError(f"n_points must be >= 1, got {n_points}")
    if rate_hz <= 0:
        raise ParameterError(f"rate_hz must be > 0, got {rate_hz}")
    if params.amplitude_mm < 0 or params.period_s <= 0 or params.shape_exponent < 1:
        raise ParameterError("need amplitude_mm >= 0, period_s > 0, shape_exponent >= 1")
    if params.amplitude_jitter_sd < 0 or params.period_jitter_sd < 0:
        raise ParameterError("jitter SDs must be >= 0")

    rng = np.random.default_rng(seed)

    def draw_cycle():
        amp = params.amplitude_mm * max(0.0, 1.0 + params.amplitude_jitter_sd * rng.standard_normal())
        tau = params.period_s * max(0.1, 1.0 + params.period_jitter_sd * rng.standard_normal())
        return amp, tau

    two_n = 2 * params.shape_exponent
    # u counts half-turns of theta, integers at end-exhale
    u_start = params.phase_rad / math.pi - 0.5
    k = math.floor(u_start)
    amp, tau = draw_cycle()
    cycle_t0 = -(u_start - k) * tau
    out = np.empty(n_points, dtype=np.float64)
    for j in range(n_points):
        t = j / rate_hz
        while t >= cycle_t0 + tau:
            cycle_t0 += tau
            k += 1
            amp, tau = draw_cycle()
        theta = math.pi * (k + (t - cycle_t0) / tau + 0.5)
        baseline = params.drift_mm_per_min * t / 60.0
        out[j] = baseline - amp * math.cos(theta) ** two_n
    return BreathingSignal(samples=out, rate_hz=rate_hz)


# --- Motion ---
def _check_displacement(d: float) -> float:
    d = float(d)
    if not math.isfinite(d):
        raise ParameterError(f"displacement must be finite, got {d}")
    return d


def _resample(values: np.ndarray, coords, order: int = 1) -> np.ndarray:
    return map_coordinates(values, coords, order=order, mode="grid-constant", cval=0.0)


def deform(phantom: PatientPhantom, displacement_mm: float) -> AttenuationVolume:
    """Inverse-warp the reference volume by d * w(z) * u with trilinear sampling."""
    d = _check_displacement(displacement_mm)
    ref = phantom.reference_volume
    if d == 0.0:
        return ref
    idx = np.indices(ref.dims, dtype=np.float64)
    shift_z = d * phantom.weight_profile_z  # mm per z slice
    coords = [idx[i] - (shift_z[None, None, :] * phantom.motion_direction[i]) / ref.spacing[i]
              for i in range(3)]
    warped = np.clip(_resample(ref.values, coords), 0.0, None)
    return AttenuationVolume(dims=ref.dims, spacing=ref.spacing, origin=ref.origin, values=warped)


def deform_mask(phantom: PatientPhantom, displacement_mm: float) -> np.ndarray:
    """GTV occupancy after the warp, as a float field in [0, 1]."""
    d = _check_displacement(displacement_mm)
    ref = phantom.reference_volume
    mask = phantom.gtv_mask.astype(np.float64)
    if d == 0.0:
        return mask
    idx = np.indices(ref.dims, dtype=np.float64)
    shift_z = d * phantom.weight_profile_z
    coords = [idx[i] - (shift_z[None, None, :] * phantom.motion_direction[i]) / ref.spacing[i]
              for i in range(3)]
    return _resample(mask, coords)


def translate(volume: AttenuationVolume, shift_mm) -> AttenuationVolume:
    """Rigid translation (setup error), trilinear, zero outside the grid."""
    shift = np.asarray(shift_mm, dtype=np.float64)
    if shift.shape != (3,) or not np.all(np.isfinite(shift)):
        raise ParameterError(f"shift must be a finite 3-vector, got {shift_mm}")
    if not shift.any():
        return volume
    idx = np.indices(volume.dims, dtype=np.float64)
    coords = [idx[i] - shift[i] / volume.spacing[i] for i in range(3)]
    moved = np.clip(_resample(volume.values, coords), 0.0, None)
    return AttenuationVolume(dims=volume.dims, spacing=volume.spacing, origin=volume.origin, values=moved)


def center_of_mass(volume: AttenuationVolume, weights: np.ndarray) -> np.ndarray:
    total = float(weights.sum())
    if total <= 0:
        raise GeometryError("center of mass of an empty mask")
    grids = np.indices(volume.dims, dtype=np.float64)
    return np.array([volume.origin[i] + (grids[i] * weights).sum() / total * volume.spacing[i]
                     for i in range(3)])


def tumor_center(phantom: PatientPhantom, displacement_mm: float,
                 setup_shift_mm: Optional[np.ndarray] = None) -> np.ndarray:
    """World-mm GTV centre of mass after displacing by d.

    Analytic p_ref + d * u inside the rigid plateau; beyond it the warped mask is resampled.
    """
    d = _check_displacement(displacement_mm)
    if not phantom.gtv_mask.any():
        raise GeometryError("GTV mask is empty")
    if d * phantom.motion_direction[2] > phantom.rigid_excursion_mm:
        center = center_of_mass(phantom.reference_volume, deform_mask(phantom, d))
    else:
        center = phantom.p_ref + d * phantom.motion_direction
    if setup_shift_mm is not None:
        center = center + np.asarray(setup_shift_mm, dtype=np.float64)
    return center
