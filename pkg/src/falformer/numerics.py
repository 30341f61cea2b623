"""Dense float64 matrix kernels.

Every function accepts 2-D matrices; most also accept a stack of matrices
(leading batch axes), which the attention code uses to run all heads at once.
Backward helpers return vector-Jacobian products for the forward functions
next to them.
"""
from __future__ import annotations

import contextlib
import tracemalloc
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError

LN_EPS = 1e-5
PINV_ITERS = 6
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2:
        raise ShapeError(f"{name} must be at least 2-D, got shape {a.shape}")
    check_finite(a, name)
    return a


def check_finite(a, name="value"):
    if not np.isfinite(a).all():
        raise NumericError(f"{name} contains NaN or Inf")
    return a


def transpose(a):
    return np.swapaxes(a, -1, -2)


def matmul(a, b):
    """Matrix product with a shape check that names both operands."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


def softmax_rows(a, scale=1.0, inplace=False):
    """Row-wise softmax of ``scale * a``, stabilised by subtracting the row max.

    ``inplace=True`` overwrites ``a`` (which must be a float64 array) instead
    of allocating a second buffer.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if inplace:
        out = a
        out *= scale
    else:
        out = np.multiply(a, scale, dtype=np.float64)
    out -= out.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def softmax_rows_backward(y, dy, scale=1.0):
    """Gradient w.r.t. the softmax input given output ``y`` and upstream ``dy``."""
    dot = np.sum(dy * y, axis=-1, keepdims=True)
    return scale * y * (dy - dot)


@dataclass
class LayerNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def layer_norm(x, gamma, beta, eps=LN_EPS, return_cache=False):
    """Normalise each row to zero mean and unit variance, then apply ``gamma*x + beta``."""
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"gamma {gamma.shape} / beta {beta.shape} do not match row length {x.shape[-1]}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gamma + beta
    if return_cache:
        return out, LayerNormCache(xhat, inv_std, gamma)
    return out


def layer_norm_backward(dy, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat = cache.xhat
    lead = tuple(range(dy.ndim - 1))
    dgamma = np.sum(dy * xhat, axis=lead)
    dbeta = np.sum(dy, axis=lead)
    dxhat = dy * cache.gamma
    dx = cache.inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_backward(x, dy):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


# --------------------------------------------------------------------------
# pseudoinverse


@dataclass
class PinvTrace:
    """Intermediates of :func:`pinv_iterative` needed for its backward pass."""

    a: np.ndarray
    norm1: np.ndarray
    norm_inf: np.ndarray
    col_arg: np.ndarray
    row_arg: np.ndarray
    zs: list = field(default_factory=list)
    azs: list = field(default_factory=list)
    u1s: list = field(default_factory=list)
    u2s: list = field(default_factory=list)


def _pinv_init(a):
    absa = np.abs(a)
    colsum = absa.sum(axis=-2)  # one per column
    rowsum = absa.sum(axis=-1)
    norm1 = colsum.max(axis=-1)
    norm_inf = rowsum.max(axis=-1)
    if np.any(norm1 == 0):
        raise NumericError("pseudoinverse of a zero matrix: initial scaling undefined")
    scale = (norm1 * norm_inf)[..., None, None]
    return transpose(a) / scale, norm1, norm_inf, colsum.argmax(axis=-1), rowsum.argmax(axis=-1)


def pinv_iterative(a, iters=PINV_ITERS, return_trace=False):
    """Approximate Moore-Penrose pseudoinverse of square ``a`` by fixed-point iteration.

    Starts from ``a.T / (||a||_1 ||a||_inf)`` and applies
    ``Z <- Z (13I - AZ (15I - AZ (7I - AZ))) / 4``, the higher-order
    Newton-Schulz variant used for Nystrom attention. The loop is unrolled so
    it can be differentiated (see :func:`pinv_iterative_backward`).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"pinv_iterative needs square matrices, got {a.shape}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    eye = np.eye(a.shape[-1])
    z, norm1, norm_inf, col_arg, row_arg = _pinv_init(a)
    trace = PinvTrace(a, norm1, norm_inf, col_arg, row_arg) if return_trace else None
    for _ in range(iters):
        az = a @ z
        u1 = az @ (7.0 * eye - az)
        u2 = az @ (15.0 * eye - u1)
        if trace is not None:
            trace.zs.append(z)
            trace.azs.append(az)
            trace.u1s.append(u1)
            trace.u2s.append(u2)
        z = 0.25 * (z @ (13.0 * eye - u2))
    check_finite(z, "pinv_iterative result")
    if return_trace:
        return z, trace
    return z


def pinv_iterative_backward(dz, trace):
    """Gradient w.r.t. the input matrix, backpropagated through every iteration."""
    a = trace.a
    eye = np.eye(a.shape[-1])
    at = transpose(a)
    da = np.zeros_like(a)
    for z, az, u1, u2 in zip(reversed(trace.zs), reversed(trace.azs),
                             reversed(trace.u1s), reversed(trace.u2s)):
        # z_next = 0.25 * z @ t3 with t3 = 13I - u2
        t3 = 13.0 * eye - u2
        dt3 = 0.25 * (transpose(z) @ dz)
        dz_prev = 0.25 * (dz @ transpose(t3))
        du2 = -dt3
        # u2 = az @ t2, t2 = 15I - u1
        t2 = 15.0 * eye - u1
        daz = du2 @ transpose(t2)
        du1 = -(transpose(az) @ du2)
        # u1 = az @ t1, t1 = 7I - az
        t1 = 7.0 * eye - az
        daz += du1 @ transpose(t1)
        daz -= transpose(az) @ du1
        # az = a @ z
        da += daz @ transpose(z)
        dz = dz_prev + at @ daz
    # z0 = a.T / (norm1 * norm_inf)
    c = (trace.norm1 * trace.norm_inf)[..., None, None]
    da += transpose(dz) / c
    dc = -np.sum(dz * at, axis=(-2, -1)) / (trace.norm1 * trace.norm_inf) ** 2
    dnorm1 = dc * trace.norm_inf
    dnorm_inf = dc * trace.norm1
    sign = np.sign(a)
    flat_da = da.reshape((-1,) + a.shape[-2:])
    flat_sign = sign.reshape((-1,) + a.shape[-2:])
    for b, (j, i, g1, gi) in enumerate(zip(np.ravel(trace.col_arg), np.ravel(trace.row_arg),
                                          np.ravel(dnorm1), np.ravel(dnorm_inf))):
        flat_da[b, :, j] += g1 * flat_sign[b, :, j]
        flat_da[b, i, :] += gi * flat_sign[b, i, :]
    return flat_da.reshape(a.shape)


def pinv_oracle(a):
    """Pseudoinverse through the SVD. Reference only, never used for training."""
    a = np.asarray(a, dtype=np.float64)
    return np.linalg.pinv(a)


def penrose_residuals(a, z):
    """Relative Frobenius residuals of the four Penrose conditions, in order
    ``AZA=A``, ``ZAZ=Z``, ``(AZ)^T=AZ``, ``(ZA)^T=ZA``."""
    a = np.asarray(a, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    az = a @ z
    za = z @ a

    def rel(x, ref):
        denom = np.linalg.norm(ref)
        return float(np.linalg.norm(x) / denom) if denom > 0 else float(np.linalg.norm(x))

    return (
        rel(az @ a - a, a),
        rel(za @ z - z, z),
        rel(az - az.T, az),
        rel(za - za.T, za),
    )


# --------------------------------------------------------------------------
# allocation accounting


@dataclass
class AllocationReport:
    peak_bytes: int = 0
    current_bytes: int = 0


@contextlib.contextmanager
def track_allocations():
    """Record peak bytes allocated inside the block (numpy buffers included).

    Uses :mod:`tracemalloc`, so the numbers count allocations made by this
    process rather than resident memory, and are stable across machines.
    Nested use is not supported.
    """
    report = AllocationReport()
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base, _ = tracemalloc.get_traced_memory()
    try:
        yield report
    finally:
        current, peak = tracemalloc.get_traced_memory()
        report.peak_bytes = max(0, peak - base)
        report.current_bytes = max(0, current - base)
        if started:
            tracemalloc.stop()
