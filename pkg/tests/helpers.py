"""Shared reference implementations and finite-difference utilities.

Everything here is deliberately slow and element-wise so it cannot share a
bug with the vectorised library code it checks.
"""

import math

import numpy as np

from labelfield.field import FieldParams


def loop_mlp_forward(params: FieldParams, features: np.ndarray):
    """Scalar-loop re-evaluation of the field MLP in float64.

    Returns (colour, density, logits) for a (B, F) feature batch.
    """
    B = features.shape[0]
    colours = np.zeros((B, 3))
    densities = np.zeros(B)
    logits = np.zeros((B, params.semantic_dim))
    for b in range(B):
        h = features[b].astype(np.float64)
        for blk in params.hidden:
            w = blk.weight.astype(np.float64)
            z = np.array(
                [sum(h[i] * w[i, j] for i in range(w.shape[0])) + float(blk.bias[j]) for j in range(w.shape[1])]
            )
            h = np.array([max(v, 0.0) for v in z])

        def head(blk):
            w = blk.weight.astype(np.float64)
            return np.array(
                [sum(h[i] * w[i, j] for i in range(w.shape[0])) + float(blk.bias[j]) for j in range(w.shape[1])]
            )

        c = head(params.color_head)
        colours[b] = [1.0 / (1.0 + math.exp(-v)) for v in c]
        d = head(params.density_head)[0]
        densities[b] = math.log1p(math.exp(-abs(d))) + max(d, 0.0)
        logits[b] = head(params.semantic_head)
    return colours, densities, logits


def loop_composite(depths, densities, colours, logits, last_delta, precision=np.float64):
    """Per-sample loop compositing for one ray, at a chosen precision."""
    depths = np.asarray(depths, dtype=precision)
    densities = np.asarray(densities, dtype=precision)
    colours = np.asarray(colours, dtype=precision)
    logits = np.asarray(logits, dtype=precision)
    n = depths.shape[0]
    trans = precision(1.0)
    depth = precision(0.0)
    colour = np.zeros(3, dtype=precision)
    sem = np.zeros(logits.shape[1], dtype=precision)
    weights = np.zeros(n, dtype=precision)
    for i in range(n):
        delta = (depths[i + 1] - depths[i]) if i + 1 < n else precision(last_delta)
        occ = precision(1.0) - np.exp(-densities[i] * delta)
        w = occ * trans
        weights[i] = w
        trans = trans * (precision(1.0) - occ)
        depth = depth + w * depths[i]
        colour = colour + w * colours[i]
        sem = sem + w * logits[i]
    var = precision(0.0)
    for i in range(n):
        var = var + weights[i] * (depth - depths[i]) ** 2
    return depth, var, colour, sem, weights


def params_to_vector(params: FieldParams) -> np.ndarray:
    return np.concatenate([a.ravel().astype(np.float64) for _, a in params.arrays()])


def vector_to_params(vec: np.ndarray, template: FieldParams) -> FieldParams:
    out = template.copy()
    offset = 0
    for _, arr in out.arrays():
        n = arr.size
        arr[:] = vec[offset : offset + n].reshape(arr.shape).astype(arr.dtype)
        offset += n
    assert offset == vec.size
    return out


def central_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Dense central-difference gradient of scalar f at float64 vector x."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2.0 * eps)
    return g


def relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    denom = max(np.linalg.norm(exact), 1e-12)
    return float(np.linalg.norm(approx - exact) / denom)
