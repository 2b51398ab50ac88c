"""Implicit scene representation: Fourier positional encoding + a small MLP.

The field maps a 3D point to colour, volume density and semantic logits.
Forward and backward passes are written out by hand against numpy arrays;
the architecture is small and fixed (4 hidden layers, three linear heads),
so a tape-based autodiff would buy nothing but a framework dependency.
All functions are pure: they never mutate their inputs, so parameter
snapshots can be shared freely across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

HIDDEN_WIDTH = 256
HIDDEN_DEPTH = 4

MAGIC = b"LFLD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncodingConfig:
    """Sinusoidal positional encoding over a normalised scene box.

    Coordinates are mapped to [-1, 1] per axis by ``bound_min``/``bound_max``
    before any trigonometry, so ``base_frequency`` is a dimensionless scale on
    the normalised coordinate. Feature layout: raw (x, y, z) if requested,
    then per band k: sin(pi * f * 2^k * q) and cos(...) for each axis.
    """

    bound_min: tuple[float, float, float]
    bound_max: tuple[float, float, float]
    num_bands: int = 10
    base_frequency: float = 1.0
    include_raw: bool = True

    def __post_init__(self):
        if self.num_bands < 0:
            raise ValueError("num_bands must be >= 0")
        lo = np.asarray(self.bound_min, dtype=np.float64)
        hi = np.asarray(self.bound_max, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("scene bound must be two 3-vectors")
        if not np.all(hi > lo):
            raise ValueError("scene bound must have positive extent on every axis")

    @property
    def feature_dim(self) -> int:
        return 3 * int(self.include_raw) + 6 * self.num_bands

    def as_dict(self) -> dict:
        return {
            "bound_min": list(self.bound_min),
            "bound_max": list(self.bound_max),
            "num_bands": self.num_bands,
            "base_frequency": self.base_frequency,
            "include_raw": self.include_raw,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncodingConfig":
        return cls(
            bound_min=tuple(d["bound_min"]),
            bound_max=tuple(d["bound_max"]),
            num_bands=int(d["num_bands"]),
            base_frequency=float(d["base_frequency"]),
            include_raw=bool(d["include_raw"]),
        )


def encode_position(points: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Encode world-space points (..., 3) into Fourier features (..., F).

    Deterministic and Lipschitz on the bound box; raises on non-finite input.
    """
    p = np.asarray(points)
    if p.shape[-1] != 3:
        raise ValueError(f"expected (..., 3) points, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite coordinates")
    dtype = p.dtype if p.dtype in (np.float32, np.float64) else np.float64
    lo = np.asarray(cfg.bound_min, dtype=dtype)
    hi = np.asarray(cfg.bound_max, dtype=dtype)
    q = (p.astype(dtype) - lo) * (2.0 / (hi - lo)) - 1.0

    parts = []
    if cfg.include_raw:
        parts.append(q)
    if cfg.num_bands:
        # (..., 3, B) phase grid, flattened band-major so each band's sin/cos
        # triplets stay contiguous.
        freqs = cfg.base_frequency * (2.0 ** np.arange(cfg.num_bands))
        phase = (np.pi * q)[..., None] * freqs.astype(dtype)
        phase = np.swapaxes(phase, -1, -2)  # (..., B, 3)
        sin = np.sin(phase)
        cos = np.cos(phase)
        both = np.concatenate([sin[..., None, :], cos[..., None, :]], axis=-2)
        parts.append(both.reshape(*p.shape[:-1], 6 * cfg.num_bands))
    if not parts:
        return np.zeros((*p.shape[:-1], 0), dtype=dtype)
    return np.concatenate(parts, axis=-1)


@dataclass
class LinearParams:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)

    def copy(self) -> "LinearParams":
        return LinearParams(self.weight.copy(), self.bias.copy())


@dataclass
class FieldParams:
    """All learnable state: 4 hidden layers plus colour/density/semantic heads.

    The same container doubles as the gradient structure (see zeros_like).
    """

    encoding: EncodingConfig
    hidden: list[LinearParams]
    color_head: LinearParams
    density_head: LinearParams
    semantic_head: LinearParams

    @property
    def semantic_dim(self) -> int:
        return self.semantic_head.bias.shape[0]

    @property
    def hidden_width(self) -> int:
        return self.hidden[0].bias.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.hidden[0].weight.dtype

    def blocks(self) -> list[tuple[str, LinearParams]]:
        out = [(f"hidden{i}", blk) for i, blk in enumerate(self.hidden)]
        out += [
            ("color", self.color_head),
            ("density", self.density_head),
            ("semantic", self.semantic_head),
        ]
        return out

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        """Named parameter tensors in a fixed, stable order."""
        out = []
        for name, blk in self.blocks():
            out.append((f"{name}.weight", blk.weight))
            out.append((f"{name}.bias", blk.bias))
        return out

    def copy(self) -> "FieldParams":
        return FieldParams(
            encoding=self.encoding,
            hidden=[blk.copy() for blk in self.hidden],
            color_head=self.color_head.copy(),
            density_head=self.density_head.copy(),
            semantic_head=self.semantic_head.copy(),
        )

    def astype(self, dtype) -> "FieldParams":
        def conv(blk: LinearParams) -> LinearParams:
            return LinearParams(blk.weight.astype(dtype), blk.bias.astype(dtype))

        return FieldParams(
            encoding=self.encoding,
            hidden=[conv(b) for b in self.hidden],
            color_head=conv(self.color_head),
            density_head=conv(self.density_head),
            semantic_head=conv(self.semantic_head),
        )

    def zeros_like(self) -> "FieldParams":
        def z(blk: LinearParams) -> LinearParams:
            return LinearParams(np.zeros_like(blk.weight), np.zeros_like(blk.bias))

        return FieldParams(
            encoding=self.encoding,
            hidden=[z(b) for b in self.hidden],
            color_head=z(self.color_head),
            density_head=z(self.density_head),
            semantic_head=z(self.semantic_head),
        )

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, a in self.arrays())


@dataclass
class FieldOutput:
    """Per-point field values with head activations already applied."""

    colour: np.ndarray  # (..., 3) in [0, 1]
    density: np.ndarray  # (...,) >= 0
    logits: np.ndarray  # (..., n) unbounded


def init_params(
    seed: int,
    semantic_dim: int,
    encoding: EncodingConfig,
    hidden_width: int = HIDDEN_WIDTH,
    dtype=np.float32,
    head_gain: float = 0.1,
) -> FieldParams:
    """He-initialised weights, zero biases; deterministic per seed.

    Head weights are scaled down by ``head_gain`` so a fresh field renders
    near-uniform class probabilities and mid-grey colour.
    """
    if semantic_dim < 1:
        raise ValueError("semantic_dim must be >= 1")
    rng = np.random.default_rng(seed)

    def linear(fan_in: int, fan_out: int, gain: float = 1.0) -> LinearParams:
        scale = gain * np.sqrt(2.0 / fan_in)
        w = rng.standard_normal((fan_in, fan_out)) * scale
        return LinearParams(w.astype(dtype), np.zeros(fan_out, dtype=dtype))

    dims = [encoding.feature_dim] + [hidden_width] * HIDDEN_DEPTH
    hidden = [linear(dims[i], dims[i + 1]) for i in range(HIDDEN_DEPTH)]
    return FieldParams(
        encoding=encoding,
        hidden=hidden,
        color_head=linear(hidden_width, 3, head_gain),
        density_head=linear(hidden_width, 1, head_gain),
        semantic_head=linear(hidden_width, semantic_dim, head_gain),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(np.zeros((), dtype=x.dtype), x)


@dataclass
class ForwardCache:
    features: np.ndarray
    pre_acts: list[np.ndarray]  # pre-activation of each hidden layer
    acts: list[np.ndarray]  # post-ReLU of each hidden layer
    color_pre: np.ndarray
    density_pre: np.ndarray
    colour: np.ndarray
    density: np.ndarray


def field_forward(
    params: FieldParams, features: np.ndarray, cache: bool = False
) -> FieldOutput | tuple[FieldOutput, ForwardCache]:
    """Evaluate the MLP on encoded features (B, F).

    Colour passes through a sigmoid, density through softplus; semantic
    logits are returned raw.
    """
    x = np.asarray(features)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != params.hidden[0].weight.shape[0]:
        raise ValueError(
            f"feature dim {x.shape[-1]} != input layer {params.hidden[0].weight.shape[0]}"
        )
    x = x.astype(params.dtype, copy=False)

    pre_acts, acts = [], []
    h = x
    for blk in params.hidden:
        z = h @ blk.weight + blk.bias
        h = np.maximum(z, 0.0)
        pre_acts.append(z)
        acts.append(h)

    color_pre = h @ params.color_head.weight + params.color_head.bias
    density_pre = (h @ params.density_head.weight + params.density_head.bias)[..., 0]
    logits = h @ params.semantic_head.weight + params.semantic_head.bias

    colour = _sigmoid(color_pre)
    density = _softplus(density_pre)

    if squeeze:
        out = FieldOutput(colour[0], density[0], logits[0])
    else:
        out = FieldOutput(colour, density, logits)
    if not cache:
        return out
    return out, ForwardCache(x, pre_acts, acts, color_pre, density_pre, colour, density)


def field_backward(
    params: FieldParams,
    features: np.ndarray,
    d_colour: np.ndarray,
    d_density: np.ndarray,
    d_logits: np.ndarray,
    cache: ForwardCache | None = None,
) -> tuple[FieldParams, np.ndarray]:
    """Gradients of <cotangent, field_forward(features)> w.r.t. params and features.

    Cotangents are taken against the activated outputs (colour in [0,1],
    density >= 0, raw logits). Returns (grads shaped like params, d_features).
    """
    if cache is None:
        _, cache = field_forward(params, np.atleast_2d(features), cache=True)
    x = cache.features
    B = x.shape[0]

    d_colour = np.asarray(d_colour, dtype=params.dtype).reshape(B, 3)
    d_density = np.asarray(d_density, dtype=params.dtype).reshape(B)
    d_logits = np.asarray(d_logits, dtype=params.dtype).reshape(B, -1)

    grads = params.zeros_like()

    # Head activations: sigmoid' = c(1-c); softplus' = sigmoid(pre).
    d_color_pre = d_colour * cache.colour * (1.0 - cache.colour)
    d_density_pre = (d_density * _sigmoid(cache.density_pre))[:, None]

    h_last = cache.acts[-1]
    grads.color_head.weight[:] = h_last.T @ d_color_pre
    grads.color_head.bias[:] = d_color_pre.sum(axis=0)
    grads.density_head.weight[:] = h_last.T @ d_density_pre
    grads.density_head.bias[:] = d_density_pre.sum(axis=0)
    grads.semantic_head.weight[:] = h_last.T @ d_logits
    grads.semantic_head.bias[:] = d_logits.sum(axis=0)

    d_h = (
        d_color_pre @ params.color_head.weight.T
        + d_density_pre @ params.density_head.weight.T
        + d_logits @ params.semantic_head.weight.T
    )

    for i in range(len(params.hidden) - 1, -1, -1):
        d_z = d_h * (cache.pre_acts[i] > 0)
        inp = cache.acts[i - 1] if i > 0 else x
        grads.hidden[i].weight[:] = inp.T @ d_z
        grads.hidden[i].bias[:] = d_z.sum(axis=0)
        d_h = d_z @ params.hidden[i].weight.T

    return grads, d_h


def scale_grads(grads: FieldParams, factor: float) -> FieldParams:
    for _, arr in grads.arrays():
        arr *= factor
    return grads


def accumulate_grads(total: FieldParams, update: FieldParams) -> FieldParams:
    for (_, dst), (_, src) in zip(total.arrays(), update.arrays()):
        dst += src
    return total


def save_checkpoint(path, params: FieldParams) -> None:
    """Versioned binary blob: magic, version, encoding config, shapes, raw arrays."""
    enc = params.encoding
    dtype_code = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}[np.dtype(params.dtype)]
    header = struct.pack(
        "<4sIBBI d 3d 3d III",
        MAGIC,
        CHECKPOINT_VERSION,
        dtype_code,
        int(enc.include_raw),
        enc.num_bands,
        enc.base_frequency,
        *enc.bound_min,
        *enc.bound_max,
        params.semantic_dim,
        params.hidden_width,
        len(params.hidden),
    )
    with open(path, "wb") as f:
        f.write(header)
        for _, arr in params.arrays():
            f.write(np.ascontiguousarray(arr, dtype=arr.dtype).astype(f"<f{dtype_code}").tobytes())


def load_checkpoint(path) -> FieldParams:
    with open(path, "rb") as f:
        blob = f.read()
    head_fmt = "<4sIBBI d 3d 3d III"
    head_size = struct.calcsize(head_fmt)
    (
        magic,
        version,
        dtype_code,
        include_raw,
        num_bands,
        base_freq,
        bx0,
        by0,
        bz0,
        bx1,
        by1,
        bz1,
        semantic_dim,
        hidden_width,
        depth,
    ) = struct.unpack(head_fmt, blob[:head_size])
    if magic != MAGIC:
        raise ValueError("not a field checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    dtype = {4: np.float32, 8: np.float64}[dtype_code]
    enc = EncodingConfig(
        bound_min=(bx0, by0, bz0),
        bound_max=(bx1, by1, bz1),
        num_bands=num_bands,
        base_frequency=base_freq,
        include_raw=bool(include_raw),
    )
    params = init_params(0, semantic_dim, enc, hidden_width=hidden_width, dtype=dtype)
    if len(params.hidden) != depth:
        raise ValueError("checkpoint depth mismatch")
    offset = head_size
    itemsize = np.dtype(dtype).itemsize
    for _, arr in params.arrays():
        n = arr.size
        chunk = blob[offset : offset + n * itemsize]
        if len(chunk) != n * itemsize:
            raise ValueError("truncated checkpoint")
        arr[:] = np.frombuffer(chunk, dtype=f"<f{dtype_code}").reshape(arr.shape)
        offset += n * itemsize
    if offset != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return params
