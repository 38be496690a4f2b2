# formats/pgm.py
import re

import numpy as np

from drr import DrrFrame
from formats._binary import read_file, write_file
from tumor_shared import FormatError

MAXVAL = 65535


def write_pgm(frame: DrrFrame, path: str) -> str:
    """16-bit binary PGM (P5, big-endian); values are clipped to [0, 1] first."""
    v = np.clip(np.asarray(frame.values, dtype=np.float64), 0.0, 1.0)
    data = np.round(v * MAXVAL).astype(">u2")
    header = f"P5\n{frame.width} {frame.height}\n{MAXVAL}\n".encode("ascii")
    write_file(path, header + data.tobytes())
    return path


def read_pgm(path: str) -> np.ndarray:
    buf = read_file(path)
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if not m:
        raise FormatError(f"{path}: not a binary PGM", 0)
    w, h, maxval = (int(g) for g in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    body = buf[m.end():]
    if len(body) < need:
        raise FormatError(f"{path}: truncated pixel data", m.end() + len(body))
    return np.frombuffer(body[:need], dtype=dtype).reshape(h, w).astype(np.float64) / maxval
