# formats/dataset_file.py
"""`.tmfd` dataset files (little-endian).

    b"TMFD" | u16 version
    str patient_id | str session | str spec_hash        (u16 length + UTF-8)
    u64 seed | u32 n_samples | u16 T_obs, T_pred, H, W
    per sample:
        u32 t0 | u32 sequence_index
        f64[3] p_ref | f64[3] amplitudes | f64 floor
        f32[T_obs*H*W] frames | f64[T_pred*3] targets | f64[T_obs*3] observed_positions
"""
import struct

import numpy as np

from dataset import DrrSample, NormalizationParams, SessionDataset
from formats._binary import ByteReader, pack_string, read_file, write_file
from tumor_shared import FormatError, ShapeError

MAGIC = b"TMFD"
VERSION = 1


def encode_dataset(ds: SessionDataset) -> bytes:
    if not ds.samples:
        raise ShapeError("cannot write an empty dataset")
    T_obs, T_pred = ds.window
    H, W = ds.samples[0].frames.shape[1:]
    parts = [
        MAGIC, struct.pack("<H", VERSION),
        pack_string(ds.patient_id), pack_string(ds.session), pack_string(ds.spec_hash),
        struct.pack("<QIHHHH", ds.seed, len(ds.samples), T_obs, T_pred, H, W),
    ]
    for s in ds.samples:
        if s.frames.shape != (T_obs, H, W) or s.targets.shape != (T_pred, 3):
            raise ShapeError("sample shape differs from dataset header", s.frames.shape, (T_obs, H, W))
        parts.append(struct.pack("<II", s.t0, s.sequence_index))
        parts.append(np.asarray(s.norm.p_ref, dtype="<f8").tobytes())
        parts.append(np.asarray(s.norm.amplitudes, dtype="<f8").tobytes())
        parts.append(struct.pack("<d", s.norm.floor_mm))
        parts.append(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(s.targets, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.observed_positions, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_dataset(buf: bytes, name: str = "dataset") -> SessionDataset:
    r = ByteReader(buf, name)
    r.expect_magic(MAGIC)
    version = r.one("H", "version")
    if version != VERSION:
        raise FormatError(f"{name}: unsupported .tmfd version {version} (expected {VERSION})", 4)
    patient_id = r.string("patient_id")
    session = r.string("session")
    spec_hash = r.string("spec_hash")
    seed, n, T_obs, T_pred, H, W = r.unpack("QIHHHH", "header dims")
    samples = []
    for i in range(n):
        t0, seq = r.unpack("II", f"sample {i} index")
        norm = NormalizationParams(
            p_ref=r.array("<f8", 3, f"sample {i} p_ref"),
            amplitudes=r.array("<f8", 3, f"sample {i} amplitudes"),
            floor_mm=r.one("d", f"sample {i} floor"),
        )
        frames = r.array("<f4", T_obs * H * W, f"sample {i} frames").reshape(T_obs, H, W)
        targets = r.array("<f8", T_pred * 3, f"sample {i} targets").reshape(T_pred, 3)
        observed = r.array("<f8", T_obs * 3, f"sample {i} observed positions").reshape(T_obs, 3)
        samples.append(DrrSample(frames=frames.astype(np.float32), targets=targets.astype(np.float64),
                                 observed_positions=observed.astype(np.float64), norm=norm,
                                 patient_id=patient_id, session=session, t0=t0, sequence_index=seq))
    r.expect_end()
    return SessionDataset(samples=samples, patient_id=patient_id, session=session,
                          spec_hash=spec_hash, seed=seed)


def write_dataset(ds: SessionDataset, path: str) -> str:
    write_file(path, encode_dataset(ds))
    return path


def read_dataset(path: str) -> SessionDataset:
    return decode_dataset(read_file(path), path)
