# drr.py
"""Coronal DRRs under the Beer-Lambert absorption-only model.

Geometry: parallel beam along the anterior-posterior (y) axis, one midpoint sample per
voxel. A frame is stored with rows along z (superior-inferior) and columns along x
(left-right); `origin` is the world position of the centre of pixel (0, 0).
"""
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import map_coordinates

from phantom import AttenuationVolume, PatientPhantom, deform, translate
from tumor_shared import DegenerateInputError, GeometryError, IMAGE_SIZE, ParameterError

AXIAL_MARGIN_MM = 50.0
LATERAL_MARGIN_MM = 100.0


@dataclass(frozen=True, eq=False)
class DrrFrame:
    values: np.ndarray
    pixel_spacing: Tuple[float, float]  # (row/z, col/x) mm
    origin: Tuple[float, float]  # (z, x) mm
    timestamp_s: float = 0.0

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class CropBox:
    center: Tuple[float, float]  # (x, z) mm
    extent: Tuple[float, float]  # half-widths (x, z) mm

    def __post_init__(self):
        if min(self.extent) <= 0:
            raise GeometryError(f"crop extent must be > 0, got {self.extent}")


# --- Projection ---
def project_coronal(volume: AttenuationVolume) -> DrrFrame:
    """exp(-sum mu * dy) along y for every (z, x) detector pixel."""
    depth = volume.values.sum(axis=1) * volume.spacing[1]
    return DrrFrame(
        values=np.exp(-depth.T),
        pixel_spacing=(volume.spacing[2], volume.spacing[0]),
        origin=(volume.origin[2], volume.origin[0]),
    )


class OpticalDepthMap:
    """Projected optical depth of a phantom's reference anatomy.

    With w depending on z only, the AP projection of the deformed and translated volume
    equals this map sampled at the displaced (z, x); the y part of a shift slides samples
    along the ray and drops out of the line integral.
    """

    def __init__(self, phantom: PatientPhantom):
        vol = phantom.reference_volume
        self.phantom = phantom
        self.depth = vol.values.sum(axis=1).T * vol.spacing[1]
        self.pixel_spacing = (vol.spacing[2], vol.spacing[0])
        self.origin = (vol.origin[2], vol.origin[0])
        nz, nx = self.depth.shape
        self._z = self.origin[0] + np.arange(nz) * self.pixel_spacing[0]
        self._x = self.origin[1] + np.arange(nx) * self.pixel_spacing[1]

    def frame(self, displacement_mm: float, setup_shift_mm=None) -> DrrFrame:
        e = np.zeros(3) if setup_shift_mm is None else np.asarray(setup_shift_mm, dtype=np.float64)
        u = self.phantom.motion_direction
        z = self._z[:, None]
        x = self._x[None, :]
        shift = float(displacement_mm) * self.phantom.weight_at(z - e[2])
        zs = z - e[2] - shift * u[2]
        xs = x - e[0] - shift * u[0]
        zi = np.broadcast_to((zs - self.origin[0]) / self.pixel_spacing[0], self.depth.shape)
        xi = np.broadcast_to((xs - self.origin[1]) / self.pixel_spacing[1], self.depth.shape)
        depth = map_coordinates(self.depth, [zi, xi], order=1, mode="grid-constant", cval=0.0)
        return DrrFrame(values=np.exp(-np.clip(depth, 0.0, None)),
                        pixel_spacing=self.pixel_spacing, origin=self.origin)


# --- Frame operations ---
def _first_index(edge_mm: float, origin: float, spacing: float) -> int:
    return int(np.floor((edge_mm - origin) / spacing + 0.5 + 1e-9))


def crop(frame: DrrFrame, box: CropBox) -> DrrFrame:
    sz, sx = frame.pixel_spacing
    z0, x0 = frame.origin
    col0 = _first_index(box.center[0] - box.extent[0], x0, sx)
    row0 = _first_index(box.center[1] - box.extent[1], z0, sz)
    ncols = max(1, int(round(2 * box.extent[0] / sx)))
    nrows = max(1, int(round(2 * box.extent[1] / sz)))
    c_lo, c_hi = max(col0, 0), min(col0 + ncols, frame.width)
    r_lo, r_hi = max(row0, 0), min(row0 + nrows, frame.height)
    if c_lo >= c_hi or r_lo >= r_hi:
        raise GeometryError(f"crop box {box} does not intersect the {frame.height}x{frame.width} frame")
    out = np.zeros((nrows, ncols), dtype=frame.values.dtype)
    out[r_lo - row0:r_hi - row0, c_lo - col0:c_hi - col0] = frame.values[r_lo:r_hi, c_lo:c_hi]
    return replace(frame, values=out, origin=(z0 + row0 * sz, x0 + col0 * sx))


def normalize01(frame: DrrFrame) -> DrrFrame:
    lo, hi = float(frame.values.min()), float(frame.values.max())
    if not hi > lo:
        raise DegenerateInputError(f"cannot normalize a constant frame (value {lo})")
    return replace(frame, values=(frame.values - lo) / (hi - lo))


def resample(frame: DrrFrame, out_size: Tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE)) -> DrrFrame:
    """Bilinear resampling on pixel centres; outputs stay within the input range."""
    rows, cols = (int(v) for v in out_size)
    if rows < 1 or cols < 1:
        raise ParameterError(f"output size must be positive, got {out_size}")
    if frame.values.size == 0:
        raise ParameterError("cannot resample an empty frame")
    if (rows, cols) == frame.values.shape:
        return frame
    fr = frame.height / rows
    fc = frame.width / cols
    ri = np.clip((np.arange(rows) + 0.5) * fr - 0.5, 0, frame.height - 1)
    ci = np.clip((np.arange(cols) + 0.5) * fc - 0.5, 0, frame.width - 1)
    grid = np.meshgrid(ri, ci, indexing="ij")
    values = map_coordinates(frame.values, grid, order=1, mode="nearest")
    sz, sx = frame.pixel_spacing
    z0, x0 = frame.origin
    return replace(
        frame, values=values, pixel_spacing=(sz * fr, sx * fc),
        origin=(z0 + (0.5 * fr - 0.5) * sz, x0 + (0.5 * fc - 0.5) * sx),
    )


def add_noise(frame: DrrFrame, sd: float, rng: np.random.Generator) -> DrrFrame:
    if sd <= 0:
        return frame
    noisy = frame.values + sd * rng.standard_normal(frame.values.shape)
    return replace(frame, values=np.clip(noisy, 0.0, None))


# --- Pipeline ---
def crop_box_for(phantom: PatientPhantom, axial_margin_mm: float = AXIAL_MARGIN_MM,
                 lateral_margin_mm: float = LATERAL_MARGIN_MM) -> CropBox:
    """GTV-centred box with margins, clipped to the detector."""
    vol = phantom.reference_volume
    idx = np.argwhere(phantom.gtv_mask)
    half_x = (idx[:, 0].max() - idx[:, 0].min() + 1) * vol.spacing[0] / 2.0
    half_z = (idx[:, 2].max() - idx[:, 2].min() + 1) * vol.spacing[2] / 2.0
    cx, cz = float(phantom.p_ref[0]), float(phantom.p_ref[2])
    ex, ez = half_x + lateral_margin_mm, half_z + axial_margin_mm
    det_x = (vol.origin[0] - vol.spacing[0] / 2, vol.origin[0] + (vol.dims[0] - 0.5) * vol.spacing[0])
    det_z = (vol.origin[2] - vol.spacing[2] / 2, vol.origin[2] + (vol.dims[2] - 0.5) * vol.spacing[2])
    x_lo, x_hi = max(cx - ex, det_x[0]), min(cx + ex, det_x[1])
    z_lo, z_hi = max(cz - ez, det_z[0]), min(cz + ez, det_z[1])
    return CropBox(center=((x_lo + x_hi) / 2, (z_lo + z_hi) / 2),
                   extent=((x_hi - x_lo) / 2, (z_hi - z_lo) / 2))


def finish_frame(raw: DrrFrame, box: CropBox, out_size=(IMAGE_SIZE, IMAGE_SIZE)) -> DrrFrame:
    """crop -> resample -> normalize01"""
    return normalize01(resample(crop(raw, box), out_size))


class FrameRenderer:
    """Renders pipeline-ready frames of one phantom against a fixed crop box."""

    def __init__(self, phantom: PatientPhantom, box: CropBox, mode: str = "fast",
                 out_size=(IMAGE_SIZE, IMAGE_SIZE), noise_sd: float = 0.0):
        if mode not in ("fast", "exact"):
            raise ParameterError(f"unknown render mode {mode!r}")
        self.phantom = phantom
        self.box = box
        self.mode = mode
        self.out_size = out_size
        self.noise_sd = noise_sd
        self._depth = OpticalDepthMap(phantom) if mode == "fast" else None

    def raw(self, displacement_mm: float, setup_shift_mm=None) -> DrrFrame:
        if self._depth is not None:
            return self._depth.frame(displacement_mm, setup_shift_mm)
        vol = deform(self.phantom, displacement_mm)
        if setup_shift_mm is not None:
            vol = translate(vol, setup_shift_mm)
        return project_coronal(vol)

    def render(self, displacement_mm: float, setup_shift_mm=None, timestamp_s: float = 0.0,
               rng: Optional[np.random.Generator] = None) -> DrrFrame:
        raw = self.raw(displacement_mm, setup_shift_mm)
        if self.noise_sd > 0:
            raw = add_noise(raw, self.noise_sd, rng if rng is not None else np.random.default_rng(0))
        return replace(finish_frame(raw, self.box, self.out_size), timestamp_s=timestamp_s)


def render_frame(phantom: PatientPhantom, displacement_mm: float, setup_shift_mm=None,
                 box: Optional[CropBox] = None, mode: str = "fast",
                 out_size=(IMAGE_SIZE, IMAGE_SIZE), timestamp_s: float = 0.0) -> DrrFrame:
    renderer = FrameRenderer(phantom, box or crop_box_for(phantom), mode, out_size)
    return renderer.render(displacement_mm, setup_shift_mm, timestamp_s)
