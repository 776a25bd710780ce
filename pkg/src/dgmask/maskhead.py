"""Depth-guided dynamic mask head: forward pass and exact backward pass.

Every layer is a 1x1 convolution, i.e. a per-pixel affine map over
channels. Inputs are handled channels-first, ``(C, N)`` with ``N = H*W``,
so each layer is one matrix product. Bit-stable results across runs rely on
BLAS running single-threaded; the trainer pins that.

Parameter layout (178 values)::

    M1  weights (8, 10) row-major, bias (8,)
    M2  weights (8, 8),            bias (8,)
    Md  weights (8,),              bias (1,)   depth layer
    Mm  weights (8,),              bias (1,)   mask layer

The mask logit is multiplied by the predicted depth before the final
sigmoid. Since that depth lies in (0, 1) the product only damps the logit
and can never flip its sign.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .features import N_INPUT

HIDDEN = 8
N_PARAMS = HIDDEN * N_INPUT + HIDDEN + HIDDEN * HIDDEN + HIDDEN + HIDDEN + 1 + HIDDEN + 1

_SIZES = [
    ("w1", (HIDDEN, N_INPUT)),
    ("b1", (HIDDEN,)),
    ("w2", (HIDDEN, HIDDEN)),
    ("b2", (HIDDEN,)),
    ("wd", (HIDDEN,)),
    ("bd", (1,)),
    ("wm", (HIDDEN,)),
    ("bm", (1,)),
]


def unpack(params):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (N_PARAMS,):
        raise ValueError(f"head params must have length {N_PARAMS}, got {params.shape}")
    out, i = {}, 0
    for name, shape in _SIZES:
        size = int(np.prod(shape))
        out[name] = params[i:i + size].reshape(shape)
        i += size
    return out


def pack(parts):
    return np.concatenate([np.asarray(parts[name], dtype=np.float64).ravel() for name, _ in _SIZES])


def init_params(rng, scale=0.1, mask_bias=0.0):
    p = {name: np.zeros(shape) for name, shape in _SIZES}
    for name in ("w1", "w2", "wd", "wm"):
        p[name] = rng.uniform(-scale, scale, size=p[name].shape)
    p["bm"][0] = mask_bias
    return pack(p)


def sigmoid(x):
    return expit(x)


def _affine(w, b, x):
    return w @ x + b[:, None]


@dataclass
class HeadOutput:
    mask_prob: np.ndarray  # (H, W)
    depth_pred: np.ndarray  # (H, W)
    cache: dict = None


def forward(features, params, keep_cache=True):
    """Run the head on a FeatureStack or a ``(10, N)`` array plus spatial shape."""
    if hasattr(features, "channels_first"):
        x = features.channels_first()
        shape = features.base.shape[:2]
    else:
        x, shape = features
        x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != N_INPUT:
        raise ValueError(f"mask head expects {N_INPUT} input channels, got {x.shape[0]}")
    p = unpack(params)
    h1_pre = _affine(p["w1"], p["b1"], x)
    return _forward_hidden(h1_pre, p, shape, x if keep_cache else None, keep_cache)


def forward_split(base_part, coords, params, shape):
    """Forward pass with the base-feature half of the first layer precomputed.

    ``base_part`` is ``W1[:, :8] @ base``; ``coords`` is the ``(2, N)``
    relative-coordinate block. Lets many anchors share one scene's features.
    """
    p = unpack(params)
    h1_pre = base_part + p["w1"][:, N_INPUT - 2:] @ coords + p["b1"][:, None]
    return _forward_hidden(h1_pre, p, shape, None, False)


def _forward_hidden(h1_pre, p, shape, x, keep_cache):
    h1 = np.maximum(h1_pre, 0.0)
    h2_pre = _affine(p["w2"], p["b2"], h1)
    f1 = np.maximum(h2_pre, 0.0)
    depth = sigmoid(p["wd"] @ f1 + p["bd"][0])
    logit = p["wm"] @ f1 + p["bm"][0]
    mask = sigmoid(logit * depth)
    cache = None
    if keep_cache:
        cache = dict(x=x, h1_pre=h1_pre, h1=h1, h2_pre=h2_pre, f1=f1, logit=logit,
                     depth=depth, mask=mask, params=p)
    return HeadOutput(mask.reshape(shape), depth.reshape(shape), cache)


def backward(output, d_mask, d_depth):
    """Gradient of a scalar loss w.r.t. the 178 head parameters.

    ``d_mask`` and ``d_depth`` are the upstream gradients with respect to
    the mask probabilities and the depth prediction. The mask gradient also
    reaches the depth layer through the logit-times-depth product.
    """
    c = output.cache
    if c is None:
        raise ValueError("HeadOutput has no cache; run forward with keep_cache=True")
    shape = output.mask_prob.shape
    if np.shape(d_mask) != shape or np.shape(d_depth) != shape:
        raise ValueError("upstream gradients must match the output's spatial size")
    p = c["params"]
    g_mask = np.asarray(d_mask, dtype=np.float64).ravel()
    g_depth = np.asarray(d_depth, dtype=np.float64).ravel()
    mask, depth, logit = c["mask"], c["depth"], c["logit"]

    g_u = g_mask * mask * (1.0 - mask)
    g_logit = g_u * depth
    g_zd = (g_depth + g_u * logit) * depth * (1.0 - depth)

    f1 = c["f1"]
    grads = {
        "wm": f1 @ g_logit,
        "bm": np.array([g_logit.sum()]),
        "wd": f1 @ g_zd,
        "bd": np.array([g_zd.sum()]),
    }
    g_f1 = p["wm"][:, None] * g_logit + p["wd"][:, None] * g_zd
    g_h2 = g_f1 * (c["h2_pre"] > 0)
    grads["w2"] = g_h2 @ c["h1"].T
    grads["b2"] = g_h2.sum(axis=1)
    g_h1 = (p["w2"].T @ g_h2) * (c["h1_pre"] > 0)
    grads["w1"] = g_h1 @ c["x"].T
    grads["b1"] = g_h1.sum(axis=1)
    return pack(grads)
