# formats/checkpoint_file.py
"""TMCK checkpoints (little-endian).

    b"TMCK" | u16 version
    config: u32 d_model, n_heads, n_layers_enc, n_layers_dec, d_ff, patch_size,
            T_obs, T_pred, image_size | f64 dropout | u8 activation (0 gelu, 1 relu)
    u32 n_params
    per parameter: u16 name length | name (UTF-8) | u8 ndim | u32[ndim] shape | f32[...] values
"""
import struct
from collections import OrderedDict
from typing import Optional

import numpy as np
from pydantic import ValidationError

from autograd import Tensor
from formats._binary import ByteReader, pack_string, read_file, write_file
from model import ForecastModel, parameter_shapes
from tumor_shared import ConfigMismatchError, FormatError, ModelConfig, ParameterError

MAGIC = b"TMCK"
VERSION = 1
_INT_FIELDS = ("d_model", "n_heads", "n_layers_enc", "n_layers_dec", "d_ff", "patch_size",
               "T_obs", "T_pred", "image_size")
_ACTIVATIONS = ("gelu", "relu")


def encode_checkpoint(model: ForecastModel) -> bytes:
    c = model.config
    parts = [MAGIC, struct.pack("<H", VERSION),
             struct.pack("<9I", *(getattr(c, k) for k in _INT_FIELDS)),
             struct.pack("<dB", c.dropout, _ACTIVATIONS.index(c.activation)),
             struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        parts.append(pack_string(name))
        parts.append(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, name: str = "checkpoint",
                      expected: Optional[ModelConfig] = None) -> ForecastModel:
    r = ByteReader(buf, name)
    r.expect_magic(MAGIC)
    version = r.one("H", "version")
    if version != VERSION:
        raise FormatError(f"{name}: unsupported TMCK version {version} (expected {VERSION})", 4)
    ints = r.unpack("9I", "config block")
    dropout, act = r.unpack("dB", "config block")
    if act >= len(_ACTIVATIONS):
        raise FormatError(f"{name}: unknown activation code {act}", r.pos - 1)
    try:
        config = ModelConfig(**dict(zip(_INT_FIELDS, ints)), dropout=dropout,
                             activation=_ACTIVATIONS[act]).validate_shape()
    except (ValidationError, ParameterError) as e:
        raise ConfigMismatchError(f"{name}: embedded config is invalid: {e}")
    if expected is not None and expected != config:
        raise ConfigMismatchError(f"{name}: checkpoint config {config.model_dump()} "
                                  f"differs from expected {expected.model_dump()}")
    shapes = parameter_shapes(config)
    n = r.one("I", "parameter count")
    if n != len(shapes):
        raise ConfigMismatchError(f"{name}: {n} parameters stored, config implies {len(shapes)}")
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for want_name, want_shape in shapes.items():
        pname = r.string("parameter name")
        ndim = r.one("B", f"{pname} ndim")
        shape = r.unpack(f"{ndim}I", f"{pname} shape")
        if pname != want_name or tuple(shape) != want_shape:
            raise ConfigMismatchError(f"{name}: record {pname}{tuple(shape)} does not match "
                                      f"config parameter {want_name}{want_shape}")
        count = int(np.prod(shape)) if shape else 1
        data = r.array("<f4", count, pname).reshape(shape).astype(np.float32)
        params[pname] = Tensor(data, requires_grad=True, name=pname)
    r.expect_end()
    return ForecastModel(config, params)


def save_checkpoint(model: ForecastModel, path: str) -> str:
    write_file(path, encode_checkpoint(model))
    return path


def load_checkpoint(path: str, expected: Optional[ModelConfig] = None) -> ForecastModel:
    return decode_checkpoint(read_file(path), path, expected)
