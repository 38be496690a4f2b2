# dataset.py
"""Sliding-window DRR datasets, session perturbations and leave-one-out cohorts."""
import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator

from drr import FrameRenderer, crop_box_for
from phantom import PatientPhantom, PhantomSpec, generate_phantom, sample_breathing, tumor_center
from tumor_shared import (
    FRAME_RATE_HZ, IMAGE_SIZE, T_OBS, T_PRED, InputNotFoundError, ManifestError,
    ParameterError, emit, run_settings,
)

Vec3 = Tuple[float, float, float]
SetupSampler = Callable[[np.random.Generator], np.ndarray]


# --- Models ---
class T2Perturbation(BaseModel):
    amplitude_scale: float = 1.0
    baseline_shift_mm: Vec3 = (0.0, 0.0, 0.0)
    tumor_scale: float = 1.0

    @classmethod
    def coerce(cls, value):
        # manifest shorthand: [amplitude_scale, si_shift_mm, tumor_scale]
        if isinstance(value, (list, tuple)) and len(value) == 3:
            a, s, t = value
            shift = tuple(s) if isinstance(s, (list, tuple)) else (0.0, 0.0, float(s))
            return cls(amplitude_scale=a, baseline_shift_mm=shift, tumor_scale=t)
        return value

    def is_identity(self) -> bool:
        return self.amplitude_scale == 1.0 and self.tumor_scale == 1.0 and not any(self.baseline_shift_mm)


class PatientSeeds(BaseModel):
    phantom: int = 0
    breathing: int = 1
    test: int = 2
    t2: int = 3


class PatientEntry(BaseModel):
    patient_id: str
    # dataset group the patient reports under (e.g. "SM", "SV"); blank means ungrouped
    group: str = ""
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)
    seeds: PatientSeeds = Field(default_factory=PatientSeeds)
    t2_perturbation: Optional[T2Perturbation] = None

    @field_validator("t2_perturbation", mode="before")
    @classmethod
    def _shorthand(cls, v):
        return T2Perturbation.coerce(v) if v is not None else v


class CohortDefaults(BaseModel):
    n_sequences: int = 10
    duration_s: float = 20.0
    setup_error_mm: float = 3.0
    # T1 sequences share the planning 4DCT, so no rigid setup shift by default
    t1_setup_error_mm: float = 0.0
    phantom: dict = Field(default_factory=dict)


class CohortManifest(BaseModel):
    patients: List[PatientEntry]
    defaults: CohortDefaults = Field(default_factory=CohortDefaults)

    def validate_cohort(self, min_patients: int = 2) -> "CohortManifest":
        ids = [p.patient_id for p in self.patients]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ManifestError(f"duplicate patient ids: {', '.join(dupes)}")
        if len(ids) < min_patients:
            raise ManifestError(f"cohort needs at least {min_patients} patients, got {len(ids)}")
        return self


def deep_merge(a: dict, b: dict) -> dict:
    """Merge b into a (in place) preserving nested sections."""
    for k, v in (b or {}).items():
        if isinstance(v, dict) and isinstance(a.get(k), dict):
            deep_merge(a[k], v)
        else:
            a[k] = v
    return a


def load_manifest(path: str, min_patients: int = 2) -> CohortManifest:
    if not os.path.exists(path):
        raise InputNotFoundError(f"manifest not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ManifestError(f"manifest {path} must be a JSON object, got {type(raw).__name__}")
    defaults = raw.get("defaults") or {}
    patients = raw.get("patients") or []
    if not isinstance(defaults, dict):
        raise ManifestError(f"manifest {path}: defaults must be an object")
    if not isinstance(patients, list) or not all(isinstance(p, dict) for p in patients):
        raise ManifestError(f"manifest {path}: patients must be a list of objects")
    base = defaults.get("phantom") or {}
    for entry in patients:
        merged = deep_merge(json.loads(json.dumps(base)), entry.get("phantom") or {})
        entry["phantom"] = merged
    try:
        manifest = CohortManifest(**raw)
    except ValidationError as e:
        raise ManifestError(f"manifest {path} is invalid: {e.errors()[0]['loc']} {e.errors()[0]['msg']}")
    return manifest.validate_cohort(min_patients)


# --- Domain types ---
@dataclass(frozen=True, eq=False)
class NormalizationParams:
    p_ref: np.ndarray
    amplitudes: np.ndarray
    floor_mm: float = 1.0

    @property
    def divisor(self) -> np.ndarray:
        return np.maximum(self.amplitudes, self.floor_mm)


def normalize_position(p, norm: NormalizationParams) -> np.ndarray:
    return (np.asarray(p, dtype=np.float64) - norm.p_ref) / norm.divisor


def denormalize_position(q, norm: NormalizationParams) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * norm.divisor + norm.p_ref


@dataclass(frozen=True, eq=False)
class DrrSample:
    frames: np.ndarray  # (T_obs, H, W) float32 in [0, 1]
    targets: np.ndarray  # (T_pred, 3) normalized
    observed_positions: np.ndarray  # (T_obs, 3) normalized
    norm: NormalizationParams
    patient_id: str
    session: str
    t0: int
    sequence_index: int = 0


@dataclass(frozen=True, eq=False)
class SessionDataset:
    samples: List[DrrSample]
    patient_id: str
    session: str
    spec_hash: str
    seed: int

    def __len__(self):
        return len(self.samples)

    @property
    def window(self) -> Tuple[int, int]:
        s = self.samples[0]
        return s.frames.shape[0], s.targets.shape[0]

    def equals(self, other: "SessionDataset") -> bool:
        head = (self.patient_id, self.session, self.spec_hash, self.seed, len(self.samples))
        if head != (other.patient_id, other.session, other.spec_hash, other.seed, len(other.samples)):
            return False
        for a, b in zip(self.samples, other.samples):
            if (a.t0, a.sequence_index, a.norm.floor_mm) != (b.t0, b.sequence_index, b.norm.floor_mm):
                return False
            pairs = [(a.frames, b.frames), (a.targets, b.targets),
                     (a.observed_positions, b.observed_positions),
                     (a.norm.p_ref, b.norm.p_ref), (a.norm.amplitudes, b.norm.amplitudes)]
            if not all(x.dtype == y.dtype and np.array_equal(x, y) for x, y in pairs):
                return False
        return True


@dataclass(frozen=True, eq=False)
class TrainingPool:
    samples: List[DrrSample]
    patient_ids: FrozenSet[str]

    def __len__(self):
        return len(self.samples)


def window_count(length: int, T_obs: int = T_OBS, T_pred: int = T_PRED) -> int:
    return max(0, length - (T_obs + T_pred) + 1)


# --- Builders ---
def _planning_norm(planning: PatientPhantom) -> NormalizationParams:
    return NormalizationParams(p_ref=planning.p_ref.copy(), amplitudes=planning.amplitudes.copy(),
                               floor_mm=run_settings().divisor_floor_mm)


def _render_sequence(renderer: FrameRenderer, phantom: PatientPhantom, signal: np.ndarray,
                     setup_shift: Optional[np.ndarray], norm: NormalizationParams,
                     seed: int, workers: int):
    rate = FRAME_RATE_HZ

    def one(j):
        rng = np.random.default_rng([seed, j]) if renderer.noise_sd > 0 else None
        return renderer.render(signal[j], setup_shift, timestamp_s=j / rate, rng=rng).values

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            frames = list(pool.map(one, range(len(signal))))
    else:
        frames = [one(j) for j in range(len(signal))]
    frames = np.stack(frames).astype(np.float32)
    centers = np.stack([tumor_center(phantom, s, setup_shift) for s in signal])
    return frames, normalize_position(centers, norm)


def _windows(frames, positions, norm, patient_id, session, sequence_index,
             T_obs: int, T_pred: int) -> List[DrrSample]:
    out = []
    for t0 in range(window_count(len(frames), T_obs, T_pred)):
        out.append(DrrSample(
            frames=frames[t0:t0 + T_obs],
            targets=positions[t0 + T_obs:t0 + T_obs + T_pred],
            observed_positions=positions[t0:t0 + T_obs],
            norm=norm, patient_id=patient_id, session=session, t0=t0,
            sequence_index=sequence_index,
        ))
    return out


def build_training_set(phantom: PatientPhantom, n_drrs: int, seed: int, *, mode: Optional[str] = None,
                       workers: int = 1, T_obs: int = T_OBS, T_pred: int = T_PRED,
                       image_size: int = IMAGE_SIZE) -> SessionDataset:
    """One breathing trace of n_drrs frames at 5 Hz, windowed into samples."""
    if n_drrs < T_obs + T_pred:
        raise ParameterError(f"n_drrs={n_drrs} is below the window length {T_obs + T_pred}")
    settings = run_settings()
    renderer = FrameRenderer(phantom, crop_box_for(phantom), mode or settings.render_mode,
                             (image_size, image_size), settings.drr_noise_sd)
    signal = sample_breathing(phantom.breathing_params, n_drrs, FRAME_RATE_HZ, seed).samples
    norm = _planning_norm(phantom)
    frames, positions = _render_sequence(renderer, phantom, signal, None, norm, seed, workers)
    samples = _windows(frames, positions, norm, phantom.patient_id, phantom.session, 0, T_obs, T_pred)
    emit("training_set_built", {"patient_id": phantom.patient_id, "n_drrs": n_drrs, "samples": len(samples)})
    return SessionDataset(samples=samples, patient_id=phantom.patient_id, session=phantom.session,
                          spec_hash=phantom.spec_hash(), seed=seed)


def uniform_setup_error(bound_mm: float) -> SetupSampler:
    return lambda rng: rng.uniform(-bound_mm, bound_mm, size=3)


def build_test_set(phantom: PatientPhantom, n_sequences: int = 10, duration_s: float = 20.0,
                   setup_error_mm: Union[float, SetupSampler] = 3.0, seed: int = 0, *,
                   planning: Optional[PatientPhantom] = None, label_reference: Optional[str] = None,
                   mode: Optional[str] = None, workers: int = 1, T_obs: int = T_OBS,
                   T_pred: int = T_PRED, image_size: int = IMAGE_SIZE) -> SessionDataset:
    """Independent free-breathing sequences, each with its own rigid setup error.

    Frames are cropped with the planning box; labels are normalized against the planning
    GTV centre (or the session one with label_reference="session") and planning amplitudes.
    """
    n_frames = int(round(duration_s * FRAME_RATE_HZ))
    if n_frames < T_obs + T_pred:
        raise ParameterError(f"{duration_s} s gives {n_frames} frames, below the window length {T_obs + T_pred}")
    if n_sequences < 1:
        raise ParameterError("n_sequences must be >= 1")
    settings = run_settings()
    planning = planning or phantom
    reference = label_reference or settings.label_reference
    norm = _planning_norm(planning)
    if reference == "session":
        norm = replace(norm, p_ref=phantom.p_ref.copy())
    sampler = uniform_setup_error(setup_error_mm) if not callable(setup_error_mm) else setup_error_mm
    renderer = FrameRenderer(phantom, crop_box_for(planning), mode or settings.render_mode,
                             (image_size, image_size), settings.drr_noise_sd)
    samples: List[DrrSample] = []
    for k in range(n_sequences):
        rng = np.random.default_rng([seed, k])
        breathing_seed = int(rng.integers(0, 2**31 - 1))
        shift = np.asarray(sampler(rng), dtype=np.float64)
        signal = sample_breathing(phantom.breathing_params, n_frames, FRAME_RATE_HZ, breathing_seed).samples
        frames, positions = _render_sequence(renderer, phantom, signal, shift, norm, breathing_seed, workers)
        samples.extend(_windows(frames, positions, norm, phantom.patient_id, phantom.session, k, T_obs, T_pred))
    emit("test_set_built", {"patient_id": phantom.patient_id, "session": phantom.session,
                            "sequences": n_sequences, "samples": len(samples)})
    return SessionDataset(samples=samples, patient_id=phantom.patient_id, session=phantom.session,
                          spec_hash=phantom.spec_hash(), seed=seed)


# --- Sessions ---
def sample_t2_perturbation(rng: np.random.Generator) -> T2Perturbation:
    return T2Perturbation(
        amplitude_scale=float(rng.uniform(0.8, 1.2)),
        baseline_shift_mm=tuple(float(v) for v in rng.uniform(-5.0, 5.0, size=3)),
        tumor_scale=float(rng.uniform(0.8, 1.2)),
    )


def simulate_t2(phantom: PatientPhantom, perturbation: T2Perturbation) -> PatientPhantom:
    """Treatment-session anatomy: scaled breathing, shifted and rescaled tumor."""
    if perturbation.amplitude_scale <= 0 or perturbation.tumor_scale <= 0:
        raise ParameterError(f"perturbation scales must be > 0, got {perturbation}")
    if perturbation.is_identity():
        return replace(phantom, session="T2")
    spec = phantom.spec
    breathing = spec.breathing.model_copy(
        update={"amplitude_mm": spec.breathing.amplitude_mm * perturbation.amplitude_scale})
    new_spec = spec.model_copy(update={
        "tumor_center_mm": tuple(c + s for c, s in zip(spec.tumor_center_mm, perturbation.baseline_shift_mm)),
        "tumor_semi_axes_mm": tuple(a * perturbation.tumor_scale for a in spec.tumor_semi_axes_mm),
        "breathing": breathing,
    })
    t2 = generate_phantom(new_spec, phantom.seed, phantom.patient_id)
    return replace(t2, session="T2")


# --- Cohort ---
@dataclass(frozen=True, eq=False)
class LoocvSplit:
    target_id: str
    ps_pool: TrainingPool
    mp_pool: TrainingPool


def _pid_key(pid: str) -> int:
    return zlib.crc32(pid.encode("utf-8"))


@dataclass(eq=False)
class Cohort:
    manifest: CohortManifest
    phantoms: Dict[str, PatientPhantom]
    t2_phantoms: Dict[str, PatientPhantom]
    mode: Optional[str] = None
    workers: int = 1
    _train_cache: Dict[Tuple[str, int], SessionDataset] = field(default_factory=dict, repr=False)
    _test_cache: Dict[Tuple[str, str], SessionDataset] = field(default_factory=dict, repr=False)

    @property
    def patient_ids(self) -> List[str]:
        return [p.patient_id for p in self.manifest.patients]

    def entry(self, pid: str) -> PatientEntry:
        return next(p for p in self.manifest.patients if p.patient_id == pid)

    def training_set(self, pid: str, n_drrs: int) -> SessionDataset:
        key = (pid, n_drrs)
        if key not in self._train_cache:
            self._train_cache[key] = build_training_set(
                self.phantoms[pid], n_drrs, self.entry(pid).seeds.breathing,
                mode=self.mode, workers=self.workers)
        return self._train_cache[key]

    def test_set(self, pid: str, session: str) -> SessionDataset:
        key = (pid, session)
        if key not in self._test_cache:
            d = self.manifest.defaults
            phantom = self.phantoms[pid] if session == "T1" else self.t2_phantoms[pid]
            seed = self.entry(pid).seeds.test + (0 if session == "T1" else 7919)
            setup = d.t1_setup_error_mm if session == "T1" else d.setup_error_mm
            self._test_cache[key] = build_test_set(
                phantom, d.n_sequences, d.duration_s, setup, seed,
                planning=self.phantoms[pid], mode=self.mode, workers=self.workers)
        return self._test_cache[key]

    def split(self, target_id: str, n_drrs: int, seed: int) -> LoocvSplit:
        ps = self.training_set(target_id, n_drrs)
        others = [pid for pid in self.patient_ids if pid != target_id]
        union: List[DrrSample] = []
        for pid in others:
            union.extend(self.training_set(pid, n_drrs).samples)
        rng = np.random.default_rng([seed, _pid_key(target_id), n_drrs])
        pick = np.sort(rng.choice(len(union), size=min(len(ps), len(union)), replace=False))
        mp_samples = [union[i] for i in pick]
        return LoocvSplit(
            target_id=target_id,
            ps_pool=TrainingPool(samples=list(ps.samples), patient_ids=frozenset([target_id])),
            mp_pool=TrainingPool(samples=mp_samples, patient_ids=frozenset(s.patient_id for s in mp_samples)),
        )

    def splits(self, n_drrs: int, seed: int) -> List[LoocvSplit]:
        return [self.split(pid, n_drrs, seed) for pid in self.patient_ids]


def build_cohort(manifest: CohortManifest, *, mode: Optional[str] = None, workers: int = 1) -> Cohort:
    manifest.validate_cohort()
    phantoms: Dict[str, PatientPhantom] = {}
    t2: Dict[str, PatientPhantom] = {}
    for entry in manifest.patients:
        ph = generate_phantom(entry.phantom, entry.seeds.phantom, entry.patient_id)
        pert = entry.t2_perturbation or sample_t2_perturbation(np.random.default_rng(entry.seeds.t2))
        phantoms[entry.patient_id] = ph
        t2[entry.patient_id] = simulate_t2(ph, pert)
        emit("phantom_generated", {"patient_id": entry.patient_id, "amplitudes": ph.amplitudes.tolist(),
                                   "gtv_ml": round(ph.gtv_volume_ml(), 3)})
    return Cohort(manifest=manifest, phantoms=phantoms, t2_phantoms=t2, mode=mode, workers=workers)
