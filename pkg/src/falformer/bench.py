"""Attention cost benchmark and landmark-quality study.

Both produce tab-separated reports: ``#`` comment lines, one header row, then
one record per row. :func:`read_report` parses them back.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .attention import (
    _nystrom_forward,
    contiguous_landmarks,
    exact_attention,
    falsa_landmarks,
)
from .clustering import kmeans, segment_means

BENCH_MODES = ("exact", "nystrom", "falsa")
DEFAULT_N_LIST = (512, 1024, 2048, 4096, 8192)
DEFAULT_EXACT_CAP = 8192
SOFTMAX_FLOPS_PER_ENTRY = 5  # scale, max-subtract, exp, sum, divide


@dataclass
class BenchRecord:
    mode: str
    n: int
    landmarks: int
    time_ms: float        # median of `repeats` timed runs
    peak_bytes: int       # counted allocations during one untimed run
    flops: int            # analytic estimate
    error: float          # relative Frobenius error vs exact attention; nan if not measured
    repeats: int
    status: str = "ok"    # or "skipped"


def exact_flops(n, d):
    """Two N x N x d products plus an N x N softmax."""
    return 4 * n * n * d + SOFTMAX_FLOPS_PER_ENTRY * n * n


def pinv_flops(m, iters=nx.PINV_ITERS):
    # init: |a| sums and scaling; per iteration: four m x m products and three
    # identity shifts, plus the final scale
    return 3 * m * m + iters * (4 * 2 * m ** 3 + 4 * m * m)


def nystrom_flops(n, m, d, iters=nx.PINV_ITERS):
    """FLOPs of ``(F A+)(B V)`` including landmark averaging, in that order."""
    landmarks = 2 * n * d
    kernels = 2 * (2 * n * m * d + SOFTMAX_FLOPS_PER_ENTRY * n * m)  # F and B
    a_kernel = 2 * m * m * d + SOFTMAX_FLOPS_PER_ENTRY * m * m
    products = 2 * m * n * d + 2 * n * m * m + 2 * n * m * d  # BV, FA, (FA)(BV)
    return landmarks + kernels + a_kernel + pinv_flops(m, iters) + products


def flop_count(mode, n, m, d, iters=nx.PINV_ITERS):
    if mode == "exact":
        return exact_flops(n, d)
    return nystrom_flops(n, m, d, iters)


def clustered_tokens(n, d, clusters, separation, rng, shuffle=True):
    """``n`` tokens from ``clusters`` unit-variance Gaussians whose centres sit
    on a sphere of radius ``separation``."""
    centers = rng.normal(size=(clusters, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= separation
    which = np.arange(n) % clusters
    if shuffle:
        rng.shuffle(which)
    return centers[which] + rng.normal(size=(n, d)), which


def random_qkv(tokens, rng, d_head=None):
    d = tokens.shape[1]
    d_head = d_head or d
    w = rng.normal(scale=1.0 / math.sqrt(d), size=(3, d, d_head))
    return tokens @ w[0], tokens @ w[1], tokens @ w[2]


def relative_error(approx, exact):
    return float(np.linalg.norm(approx - exact) / np.linalg.norm(exact))


# --------------------------------------------------------------------------
# timing benchmark


def _bench_callable(mode, q, k, v, landmarks, tokens, seed, pinv_iters):
    if mode == "exact":
        return lambda: exact_attention(q, k, v)
    if mode == "nystrom":
        def run():
            q_l, k_l = contiguous_landmarks(q, k, landmarks)
            return _nystrom_forward(q, k, v, q_l, k_l, pinv_iters, False, False, keep_factors=False)[0]
        return run
    # row 0 plays the CLS token; the rest are clustered into landmarks - 1 segments
    assignment = kmeans(tokens[1:], max(1, landmarks - 1), seed=seed)

    def run():
        q_l, k_l = falsa_landmarks(q[1:], k[1:], assignment, q[0], k[0])
        return _nystrom_forward(q, k, v, q_l, k_l, pinv_iters, False, False, keep_factors=False)[0]
    return run


def bench_attention(n_list=DEFAULT_N_LIST, modes=BENCH_MODES, landmarks=257, repeats=3, dim=64,
                    exact_cap=DEFAULT_EXACT_CAP, seed=0, clusters=8, separation=4.0,
                    pinv_iters=nx.PINV_ITERS, measure_error=False, progress=None):
    """Time one attention forward per (mode, N).

    The timed region is the attention step alone: landmark averaging plus the
    Nystrom products, or the exact softmax attention. Q/K/V projection and
    k-means clustering are outside it. Exact mode is recorded as ``skipped``
    above ``exact_cap`` tokens.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    records = []
    for n in n_list:
        rng = np.random.default_rng([seed, n])
        tokens, _ = clustered_tokens(n, dim, clusters, separation, rng)
        q, k, v = random_qkv(tokens, rng)
        reference = None
        for mode in modes:
            m = n if mode == "exact" else min(landmarks, n)
            if mode == "exact" and n > exact_cap:
                records.append(BenchRecord(mode, n, m, math.nan, 0, flop_count(mode, n, m, dim, pinv_iters),
                                           math.nan, repeats, "skipped"))
                continue
            fn = _bench_callable(mode, q, k, v, m, tokens, seed, pinv_iters)
            with nx.track_allocations() as alloc:
                out = fn()
            error = math.nan
            if measure_error and n <= exact_cap:
                if reference is None:
                    reference = exact_attention(q, k, v)
                error = relative_error(out, reference)
            del out
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                times.append(1e3 * (time.perf_counter() - t0))
            rec = BenchRecord(mode, n, m, float(np.median(times)), int(alloc.peak_bytes),
                              flop_count(mode, n, m, dim, pinv_iters), error, repeats)
            records.append(rec)
            if progress is not None:
                progress(rec)
    return records


def loglog_slope(ns, times):
    """Least-squares slope of log(time) against log(N)."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(times, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


# --------------------------------------------------------------------------
# approximation-error study


@dataclass
class ApproxRecord:
    seed: int
    mode: str
    error: float


def approx_error_study(n=64, clusters=4, separation=6.0, landmarks=4, seeds=20, dim=8,
                       oracle_pinv=False, pinv_iters=nx.PINV_ITERS, seed0=0):
    """Relative error of contiguous-landmark vs k-means-landmark Nystrom attention.

    Tokens come from ``clusters`` Gaussians in shuffled order, so contiguous
    runs mix clusters while k-means segments follow them. No CLS token is
    involved: both modes use exactly ``landmarks`` landmarks.
    Returns ``(records, medians)``.
    """
    records = []
    for s in range(seed0, seed0 + seeds):
        rng = np.random.default_rng(s)
        tokens, _ = clustered_tokens(n, dim, clusters, separation, rng)
        q, k, v = random_qkv(tokens, rng)
        exact = exact_attention(q, k, v)
        q_c, k_c = contiguous_landmarks(q, k, landmarks)
        assignment = kmeans(tokens, landmarks, seed=s)
        q_f, k_f = segment_means(q, assignment), segment_means(k, assignment)
        for mode, (q_l, k_l) in (("nystrom", (q_c, k_c)), ("falsa", (q_f, k_f))):
            out, _, _ = _nystrom_forward(q, k, v, q_l, k_l, pinv_iters, oracle_pinv, False,
                                         keep_factors=False)
            records.append(ApproxRecord(s, mode, relative_error(out, exact)))
    medians = {mode: float(np.median([r.error for r in records if r.mode == mode]))
               for mode in ("nystrom", "falsa")}
    return records, medians


# --------------------------------------------------------------------------
# report I/O


def _fmt(value):
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def format_report(records, comments=()):
    if not records:
        raise ValueError("no records to write")
    names = [f.name for f in fields(records[0])]
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(names)
    for rec in records:
        row = asdict(rec)
        writer.writerow([_fmt(row[name]) for name in names])
    return buf.getvalue()


def write_report(path, records, comments=()):
    """Overwrite ``path`` with a freshly formatted report."""
    with open(path, "w") as fh:
        fh.write(format_report(records, comments))


def read_report(path_or_text):
    """Parse a report into a list of dicts with numeric fields converted."""
    text = path_or_text
    if "\n" not in str(path_or_text):
        with open(path_or_text) as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    rows = []
    for row in csv.DictReader(lines, delimiter="\t"):
        parsed = {}
        for key, value in row.items():
            try:
                parsed[key] = int(value)
            except ValueError:
                try:
                    parsed[key] = float(value)
                except ValueError:
                    parsed[key] = value
        rows.append(parsed)
    return rows
