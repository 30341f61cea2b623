"""Exact, Nystrom and feature-aware-landmark (FALSA) self-attention.

All three engines share one Q/K/V interface. Matrices may carry a leading
head axis, ``(heads, N, d_head)``, in which case every head is processed in
one batched call.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .clustering import (
    SegmentAssignment,
    contiguous_assignment,
    segment_means,
    segment_means_backward,
)
from .errors import ConfigError, ShapeError

MODES = ("exact", "nystrom", "falsa")


@dataclass
class AttentionParams:
    wq: np.ndarray  # (d_model, heads * d_head)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (heads * d_head, d_model)
    heads: int = 1

    def __post_init__(self):
        d_model, inner = self.wq.shape
        if self.heads < 1 or inner % self.heads:
            raise ConfigError(f"projection width {inner} not divisible by heads={self.heads}")
        for name in ("wk", "wv"):
            if getattr(self, name).shape != self.wq.shape:
                raise ShapeError(f"{name} shape {getattr(self, name).shape} != wq shape {self.wq.shape}")
        if self.wo.shape != (inner, d_model):
            raise ShapeError(f"wo shape {self.wo.shape} != {(inner, d_model)}")

    @property
    def d_head(self):
        return self.wq.shape[1] // self.heads


@dataclass
class NystromFactors:
    """The three Nystrom kernels; ``a_tilde`` is already pseudo-inverted."""

    f_tilde: np.ndarray   # (N, m)
    a_tilde: np.ndarray   # (m, m)
    b_tilde: np.ndarray   # (m, N)
    a_kernel: np.ndarray  # (m, m), softmax before the pseudoinverse

    @property
    def n_landmarks(self):
        return self.a_tilde.shape[-1]


def _scale(q):
    return 1.0 / np.sqrt(q.shape[-1])


def _check_qkv(q, k, v):
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape} does not match key dim {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")


def exact_attention(q, k, v, return_probs=False):
    """``softmax(q k^T / sqrt(d)) v``; the reference both approximations are checked against."""
    q, k, v = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    _check_qkv(q, k, v)
    probs = nx.softmax_rows(q @ nx.transpose(k), _scale(q), inplace=True)
    out = probs @ v
    if return_probs:
        return out, probs
    return out


def contiguous_landmarks(q, k, n_landmarks):
    """Vanilla Nystrom landmarks: means over ordered runs of tokens.

    When ``N`` is not a multiple of ``n_landmarks`` the leading runs are one
    token longer.
    """
    if n_landmarks < 1:
        raise ValueError("n_landmarks must be >= 1")
    assignment = contiguous_assignment(q.shape[-2], n_landmarks)
    return segment_means(q, assignment), segment_means(k, assignment)


def falsa_landmarks(q, k, assignment, cls_q, cls_k):
    """Segment means of the patch-token queries/keys, with the CLS rows prepended.

    ``q`` and ``k`` exclude the CLS token, which is passed separately as
    ``cls_q``/``cls_k`` (shape ``(..., 1, d)`` or ``(d,)``).
    """
    if q.shape[-2] != len(assignment.ids) or k.shape[-2] != len(assignment.ids):
        raise ShapeError(
            f"assignment covers {len(assignment.ids)} tokens but q/k have {q.shape[-2]}/{k.shape[-2]} rows"
        )
    cls_q = np.asarray(cls_q, dtype=np.float64).reshape(q.shape[:-2] + (1, q.shape[-1]))
    cls_k = np.asarray(cls_k, dtype=np.float64).reshape(k.shape[:-2] + (1, k.shape[-1]))
    q_l = np.concatenate([cls_q, segment_means(q, assignment)], axis=-2)
    k_l = np.concatenate([cls_k, segment_means(k, assignment)], axis=-2)
    return q_l, k_l


@dataclass
class _NystromCache:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    q_l: np.ndarray
    k_l: np.ndarray
    factors: NystromFactors
    fa: np.ndarray
    bv: np.ndarray
    pinv_trace: object
    scale: float


def _nystrom_forward(q, k, v, q_l, k_l, pinv_iters, oracle, retain, keep_factors=True):
    # with neither retain nor keep_factors, the N x m buffers are released as
    # soon as possible so peak working memory stays near two of them
    scale = _scale(q)
    kernel = nx.softmax_rows(q_l @ nx.transpose(k_l), scale, inplace=True)
    trace = None
    if oracle:
        a = nx.pinv_oracle(kernel)
    elif retain:
        a, trace = nx.pinv_iterative(kernel, pinv_iters, return_trace=True)
    else:
        a = nx.pinv_iterative(kernel, pinv_iters)
    b = nx.softmax_rows(q_l @ nx.transpose(k), scale, inplace=True)
    bv = b @ v
    if not (retain or keep_factors):
        del b
    f = nx.softmax_rows(q @ nx.transpose(k_l), scale, inplace=True)
    fa = f @ a
    if not (retain or keep_factors):
        del f
        return fa @ bv, None, None
    out = fa @ bv
    factors = NystromFactors(f, a, b, kernel)
    cache = _NystromCache(q, k, v, q_l, k_l, factors, fa, bv, trace, scale) if retain else None
    return out, factors, cache


def _nystrom_backward(dout, cache):
    """Returns gradients for ``(q, k, v, q_l, k_l)``."""
    if cache.pinv_trace is None:
        raise ValueError("backward through the SVD pseudoinverse is not supported")
    fac = cache.factors
    t = nx.transpose
    d_fa = dout @ t(cache.bv)
    d_bv = t(cache.fa) @ dout
    d_f = d_fa @ t(fac.a_tilde)
    d_a = t(fac.f_tilde) @ d_fa
    d_b = d_bv @ t(cache.v)
    dv = t(fac.b_tilde) @ d_bv
    d_kernel = nx.pinv_iterative_backward(d_a, cache.pinv_trace)

    s = cache.scale
    g_f = nx.softmax_rows_backward(fac.f_tilde, d_f, s)        # d(q k_l^T)
    g_a = nx.softmax_rows_backward(fac.a_kernel, d_kernel, s)  # d(q_l k_l^T)
    g_b = nx.softmax_rows_backward(fac.b_tilde, d_b, s)        # d(q_l k^T)
    dq = g_f @ cache.k_l
    dk_l = t(g_f) @ cache.q + t(g_a) @ cache.q_l
    dq_l = g_a @ cache.k_l + g_b @ cache.k
    dk = t(g_b) @ cache.q_l
    return dq, dk, dv, dq_l, dk_l


def nystrom_attention(q, k, v, q_l, k_l, pinv_iters=nx.PINV_ITERS, oracle_pinv=False):
    """Nystrom approximation ``(F A+)(B v)`` of softmax attention.

    ``F = softmax(q k_l^T/sqrt d)``, ``A = softmax(q_l k_l^T/sqrt d)`` and
    ``B = softmax(q_l k^T/sqrt d)``. Nothing of size N x N is formed, so time
    and memory are O(N m). Returns ``(output, NystromFactors)``.
    """
    q, k, v, q_l, k_l = (np.asarray(t, dtype=np.float64) for t in (q, k, v, q_l, k_l))
    _check_qkv(q, k, v)
    if q_l.shape[-1] != q.shape[-1] or k_l.shape[-1] != k.shape[-1]:
        raise ShapeError(f"landmark dims {q_l.shape}/{k_l.shape} differ from q/k dims")
    if q_l.shape[-2] != k_l.shape[-2]:
        raise ShapeError(f"{q_l.shape[-2]} query landmarks but {k_l.shape[-2]} key landmarks")
    out, factors, _ = _nystrom_forward(q, k, v, q_l, k_l, pinv_iters, oracle_pinv, retain=False)
    return out, factors


# --------------------------------------------------------------------------
# multi-head wrapper


@dataclass
class AttendCache:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    concat: np.ndarray
    mode: str
    assignment: SegmentAssignment | None
    probs: np.ndarray | None = None
    nystrom: _NystromCache | None = None


def _split_heads(x, heads):
    n, width = x.shape
    return x.reshape(n, heads, width // heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d)


def _landmarks(q, k, mode, assignment, n_landmarks):
    if mode == "falsa":
        return falsa_landmarks(q[:, 1:], k[:, 1:], assignment, q[:, :1], k[:, :1])
    return contiguous_landmarks(q, k, n_landmarks)


def attend_forward(x, params, mode="falsa", assignment=None, n_landmarks=None,
                   pinv_iters=nx.PINV_ITERS, oracle_pinv=False, retain=True):
    """Multi-head attention over token rows ``x`` whose row 0 is the CLS token.

    ``falsa`` needs a :class:`SegmentAssignment` over rows ``1..N``; segment
    ids are shared by all heads and the means are taken in each head's
    projected space. ``nystrom`` uses ``n_landmarks`` contiguous runs over
    all rows. Returns ``(output, cache)``; ``cache`` is None unless ``retain``.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown attention mode {mode!r}; expected one of {MODES}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.wq.shape[0]:
        raise ShapeError(f"tokens {x.shape} do not match d_model={params.wq.shape[0]}")
    if mode == "falsa":
        if assignment is None:
            raise ConfigError("falsa mode requires a segment assignment")
        if len(assignment.ids) != x.shape[0] - 1:
            raise ShapeError(
                f"assignment covers {len(assignment.ids)} tokens, expected {x.shape[0] - 1} (CLS excluded)"
            )
    if mode == "nystrom" and n_landmarks is None:
        raise ConfigError("nystrom mode requires n_landmarks")

    h = params.heads
    q = _split_heads(x @ params.wq, h)
    k = _split_heads(x @ params.wk, h)
    v = _split_heads(x @ params.wv, h)
    probs = ncache = None
    if mode == "exact":
        heads_out, probs = exact_attention(q, k, v, return_probs=True)
    else:
        q_l, k_l = _landmarks(q, k, mode, assignment, n_landmarks)
        heads_out, _, ncache = _nystrom_forward(q, k, v, q_l, k_l, pinv_iters, oracle_pinv,
                                                retain, keep_factors=False)
    concat = _merge_heads(heads_out)
    out = concat @ params.wo
    nx.check_finite(out, "attention output")
    if not retain:
        return out, None
    return out, AttendCache(x, q, k, v, concat, mode, assignment, probs, ncache)


def attend_backward(dout, params, cache):
    """Returns ``(dx, {"wq", "wk", "wv", "wo"})`` for :func:`attend_forward`."""
    grads = {"wo": cache.concat.T @ dout}
    d_heads = _split_heads(dout @ params.wo.T, params.heads)
    if cache.mode == "exact":
        p = cache.probs
        dv = nx.transpose(p) @ d_heads
        dp = d_heads @ nx.transpose(cache.v)
        g = nx.softmax_rows_backward(p, dp, _scale(cache.q))
        dq = g @ cache.k
        dk = nx.transpose(g) @ cache.q
    else:
        dq, dk, dv, dq_l, dk_l = _nystrom_backward(d_heads, cache.nystrom)
        if cache.mode == "falsa":
            dq[:, :1] += dq_l[:, :1]
            dk[:, :1] += dk_l[:, :1]
            dq[:, 1:] += segment_means_backward(dq_l[:, 1:], cache.assignment)
            dk[:, 1:] += segment_means_backward(dk_l[:, 1:], cache.assignment)
        else:
            runs = contiguous_assignment(cache.x.shape[0], dq_l.shape[-2])
            dq += segment_means_backward(dq_l, runs)
            dk += segment_means_backward(dk_l, runs)
    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    x = cache.x
    grads["wq"] = x.T @ dq
    grads["wk"] = x.T @ dk
    grads["wv"] = x.T @ dv
    dx = dq @ params.wq.T + dk @ params.wk.T + dv @ params.wv.T
    return dx, grads


def multi_head_attend(tokens, params, mode="falsa", assignment=None, pinv_iters=nx.PINV_ITERS,
                      n_landmarks=None, oracle_pinv=False):
    """Inference-only multi-head attention; see :func:`attend_forward`."""
    out, _ = attend_forward(tokens, params, mode, assignment, n_landmarks,
                            pinv_iters, oracle_pinv, retain=False)
    return out
