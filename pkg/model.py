# model.py
"""Encoder-decoder forecaster over DRR patch tokens.

Encoder: frames are cut into non-overlapping patches, projected to d_model and given a
fixed spatio-temporal sinusoidal encoding (first half of the channels: patch index, second
half: frame index), then run through pre-norm self-attention blocks.

Decoder: normalized 3-D positions are embedded (3 -> d_model) plus a 1-D step encoding,
then run through pre-norm blocks with causal self-attention and cross-attention to the
encoder memory. A linear head maps every decoder token back to a 3-D position.

Parameter count for d = d_model, f = d_ff, p = patch_size:
    p^2 d + d                          patch projection
  + 4d                                 position embedding (3 -> d)
  + L_enc (4d^2 + 9d + 2df + f) + 2d   encoder blocks + final norm
  + L_dec (8d^2 + 15d + 2df + f) + 2d  decoder blocks + final norm
  + 3d + 3                             output head
"""
from collections import OrderedDict
from typing import List, Optional, Tuple

import numpy as np

import autograd as ag
from autograd import Tensor
from tumor_shared import ContractError, ModelConfig, ShapeError

MASK_VALUE = -1e9


# --- Parameters ---
def _attention_shapes(prefix: str, d: int) -> List[Tuple[str, tuple]]:
    out = []
    for n in ("q", "k", "v", "o"):
        out += [(f"{prefix}.w{n}", (d, d)), (f"{prefix}.b{n}", (d,))]
    return out


def _norm_shapes(prefix: str, d: int) -> List[Tuple[str, tuple]]:
    return [(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))]


def _ff_shapes(prefix: str, d: int, f: int) -> List[Tuple[str, tuple]]:
    return [(f"{prefix}.w1", (d, f)), (f"{prefix}.b1", (f,)), (f"{prefix}.w2", (f, d)), (f"{prefix}.b2", (d,))]


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    """Every parameter name and shape, in checkpoint order."""
    d, f, p = config.d_model, config.d_ff, config.patch_size
    shapes: List[Tuple[str, tuple]] = [
        ("patch.w", (p * p, d)), ("patch.b", (d,)),
        ("pos_embed.w", (3, d)), ("pos_embed.b", (d,)),
    ]
    for i in range(config.n_layers_enc):
        pre = f"enc.{i}"
        shapes += _norm_shapes(f"{pre}.ln1", d) + _attention_shapes(f"{pre}.attn", d)
        shapes += _norm_shapes(f"{pre}.ln2", d) + _ff_shapes(f"{pre}.ff", d, f)
    shapes += _norm_shapes("enc.norm", d)
    for i in range(config.n_layers_dec):
        pre = f"dec.{i}"
        shapes += _norm_shapes(f"{pre}.ln1", d) + _attention_shapes(f"{pre}.self", d)
        shapes += _norm_shapes(f"{pre}.ln2", d) + _attention_shapes(f"{pre}.cross", d)
        shapes += _norm_shapes(f"{pre}.ln3", d) + _ff_shapes(f"{pre}.ff", d, f)
    shapes += _norm_shapes("dec.norm", d)
    shapes += [("head.w", (d, 3)), ("head.b", (3,))]
    return OrderedDict(shapes)


def parameter_count(config: ModelConfig) -> int:
    d, f, p = config.d_model, config.d_ff, config.patch_size
    return (p * p * d + d + 4 * d
            + config.n_layers_enc * (4 * d * d + 9 * d + 2 * d * f + f) + 2 * d
            + config.n_layers_dec * (8 * d * d + 15 * d + 2 * d * f + f) + 2 * d
            + 3 * d + 3)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-glorot_bound(shape[0], shape[1]), glorot_bound(shape[0], shape[1]), size=shape)


# --- Encodings ---
def sinusoid_table(positions: np.ndarray, channels: int) -> np.ndarray:
    """sin/cos pairs over `channels` with the usual 10000^(2k/channels) wavelengths."""
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    k = np.arange(channels // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * k / channels)
    table = np.zeros((pos.shape[0], channels))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def spatiotemporal_table(T: int, n_patches: int, d_model: int) -> np.ndarray:
    half = d_model // 2
    spatial = sinusoid_table(np.arange(n_patches), half)
    temporal = sinusoid_table(np.arange(T), half)
    return np.concatenate([np.tile(spatial, (T, 1)), np.repeat(temporal, n_patches, axis=0)], axis=1)


def causal_mask(n: int) -> np.ndarray:
    """0 on and below the diagonal, MASK_VALUE above."""
    return np.triu(np.full((n, n), MASK_VALUE), k=1)


# --- Model ---
class ForecastModel:
    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Tensor]"):
        self.config = config.validate_shape()
        expected = parameter_shapes(config)
        if list(params) != list(expected) or any(params[k].shape != s for k, s in expected.items()):
            raise ContractError("parameters do not match the model configuration")
        self.params = params
        self._pos_table = spatiotemporal_table(config.T_obs, config.n_patches, config.d_model)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def dtype(self):
        return self.params["patch.w"].dtype

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def astype(self, dtype) -> "ForecastModel":
        params = OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k))
                             for k, v in self.params.items())
        return ForecastModel(self.config, params)

    def copy(self) -> "ForecastModel":
        return self.astype(self.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # building blocks
    def _linear(self, x: Tensor, w: str, b: str) -> Tensor:
        return x @ self.params[w] + self.params[b]

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return ag.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _split_heads(self, x: Tensor) -> Tensor:
        B, S, d = x.shape
        h = self.config.n_heads
        return x.reshape(B, S, h, d // h).transpose(0, 2, 1, 3)

    def _attention(self, x: Tensor, memory: Tensor, prefix: str, mask: Optional[np.ndarray],
                   training: bool, rng) -> Tensor:
        q = self._split_heads(self._linear(x, f"{prefix}.wq", f"{prefix}.bq"))
        k = self._split_heads(self._linear(memory, f"{prefix}.wk", f"{prefix}.bk"))
        v = self._split_heads(self._linear(memory, f"{prefix}.wv", f"{prefix}.bv"))
        dh = self.config.d_model // self.config.n_heads
        scores = (q @ k.transpose()) * (1.0 / np.sqrt(dh))
        if mask is not None:
            scores = scores + mask.astype(scores.dtype)
        attn = ag.dropout(ag.softmax(scores, axis=-1), self.config.dropout, training, rng)
        out = (attn @ v).transpose(0, 2, 1, 3)
        B, S = out.shape[:2]
        return self._linear(out.reshape(B, S, self.config.d_model), f"{prefix}.wo", f"{prefix}.bo")

    def _feed_forward(self, x: Tensor, prefix: str, training: bool, rng) -> Tensor:
        act = ag.gelu if self.config.activation == "gelu" else ag.relu
        h = ag.dropout(act(self._linear(x, f"{prefix}.w1", f"{prefix}.b1")), self.config.dropout, training, rng)
        return self._linear(h, f"{prefix}.w2", f"{prefix}.b2")

    # encoder
    def tokenize_frames(self, frames) -> Tensor:
        """(B, T_obs, H, W) or (T_obs, H, W) -> (B, T_obs * N_patch, d_model); order (t, row, col)."""
        c = self.config
        arr = np.asarray(frames)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[1:] != (c.T_obs, c.image_size, c.image_size):
            raise ShapeError("frames do not match the model input", arr.shape,
                             ("B", c.T_obs, c.image_size, c.image_size))
        B, T, H, W = arr.shape
        p = c.patch_size
        patches = arr.reshape(B, T, H // p, p, W // p, p).transpose(0, 1, 2, 4, 3, 5)
        patches = patches.reshape(B, T * c.n_patches, p * p).astype(self.dtype)
        return self._linear(Tensor(patches), "patch.w", "patch.b")

    def pos_encode(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-2] != self._pos_table.shape[0]:
            raise ShapeError("token count does not match T_obs * N_patch", tokens.shape, self._pos_table.shape)
        return tokens + self._pos_table.astype(tokens.dtype)

    def encode(self, tokens: Tensor, training: bool = False, rng=None) -> Tensor:
        x = tokens
        p = self.config.dropout
        for i in range(self.config.n_layers_enc):
            pre = f"enc.{i}"
            h = self._norm(x, f"{pre}.ln1")
            x = x + ag.dropout(self._attention(h, h, f"{pre}.attn", None, training, rng), p, training, rng)
            h = self._norm(x, f"{pre}.ln2")
            x = x + ag.dropout(self._feed_forward(h, f"{pre}.ff", training, rng), p, training, rng)
            ag.check_finite(x, f"encoder layer {i}")
        return self._norm(x, "enc.norm")

    # decoder
    def _decode(self, memory: Tensor, positions, training: bool = False, rng=None) -> Tensor:
        """(B, S, 3) decoder context -> (B, S, 3) next-position predictions."""
        pos = positions if isinstance(positions, Tensor) else Tensor(np.asarray(positions, dtype=self.dtype))
        if pos.ndim != 3 or pos.shape[-1] != 3:
            raise ShapeError("decoder context must be (B, S, 3)", pos.shape)
        S = pos.shape[1]
        x = self._linear(pos, "pos_embed.w", "pos_embed.b")
        x = x + sinusoid_table(np.arange(S), self.config.d_model).astype(x.dtype)
        mask = causal_mask(S)
        p = self.config.dropout
        for i in range(self.config.n_layers_dec):
            pre = f"dec.{i}"
            h = self._norm(x, f"{pre}.ln1")
            x = x + ag.dropout(self._attention(h, h, f"{pre}.self", mask, training, rng), p, training, rng)
            h = self._norm(x, f"{pre}.ln2")
            x = x + ag.dropout(self._attention(h, memory, f"{pre}.cross", None, training, rng), p, training, rng)
            h = self._norm(x, f"{pre}.ln3")
            x = x + ag.dropout(self._feed_forward(h, f"{pre}.ff", training, rng), p, training, rng)
            ag.check_finite(x, f"decoder layer {i}")
        return self._linear(self._norm(x, "dec.norm"), "head.w", "head.b")

    def decode_teacher_forced(self, memory: Tensor, context, training: bool = False, rng=None) -> Tensor:
        """context: (B, T_obs + T_pred - 1, 3) observed positions followed by all but the last target."""
        c = self.config
        n = c.T_obs + c.T_pred - 1
        shape = context.shape if isinstance(context, Tensor) else np.shape(context)
        if len(shape) != 3 or shape[1] != n:
            raise ShapeError("teacher-forced context has the wrong token count", shape, ("B", n, 3))
        out = self._decode(memory, context, training, rng)
        return out[:, c.T_obs - 1:, :]

    def decode_autoregressive(self, memory: Tensor, observed) -> np.ndarray:
        c = self.config
        ctx = np.asarray(observed, dtype=self.dtype)
        if ctx.ndim == 2:
            ctx = ctx[None]
        if ctx.ndim != 3 or ctx.shape[1:] != (c.T_obs, 3):
            raise ShapeError("observed positions must be (B, T_obs, 3)", ctx.shape, ("B", c.T_obs, 3))
        preds = []
        for _ in range(c.T_pred):
            nxt = self._decode(memory, ctx).data[:, -1:, :]
            preds.append(nxt)
            ctx = np.concatenate([ctx, nxt], axis=1)
        return np.concatenate(preds, axis=1)

    # end to end
    def encode_frames(self, frames, training: bool = False, rng=None) -> Tensor:
        return self.encode(self.pos_encode(self.tokenize_frames(frames)), training, rng)

    def forward_teacher_forced(self, frames, observed, targets, training: bool = True, rng=None) -> Tensor:
        memory = self.encode_frames(frames, training, rng)
        context = np.concatenate([np.asarray(observed), np.asarray(targets)[:, :-1]], axis=1)
        return self.decode_teacher_forced(memory, context.astype(self.dtype), training, rng)

    def predict(self, frames, observed) -> np.ndarray:
        """Batched autoregressive inference, (B, T_pred, 3) normalized positions."""
        if ag.current_tape() is not None:
            raise ContractError("predict must run outside a tape")
        return self.decode_autoregressive(self.encode_frames(frames), observed)


def init_glorot(config: ModelConfig, seed: int, dtype=np.float32) -> ForecastModel:
    """Glorot-uniform weight matrices, zero biases, unit layer-norm gains."""
    config.validate_shape()
    rng = np.random.default_rng(seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if len(shape) == 2:
            data = glorot_uniform(shape, rng)
        elif name.endswith(".g"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return ForecastModel(config, params)


def parameters_equal(a: ForecastModel, b: ForecastModel) -> bool:
    return (a.config == b.config and all(np.array_equal(a[k].data, b[k].data) and a[k].dtype == b[k].dtype
                                         for k in a.params))
