"""Vectorized whole-batch kernels for cells with a plain recurrent candidate.

Training and evaluation loop over time but not over batch elements: every
per-step quantity carries a leading batch axis, and the delivery window is
laid out (window_row, batch, hidden) so pops and deposits are contiguous.
Only the "rnn" inner kind (covering "dmu" and "rnn") is implemented; gated
inner cells fall back to the per-sequence path in :mod:`dmu.backprop`.

Results match the per-sequence implementation to floating-point accumulation
order; both are deterministic run to run.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cells import (
    CellConfig,
    CellParams,
    RnnParams,
    activation_deriv,
    activation_fn,
    inner_kind,
    observe_gate,
    zeros_like_params,
)
from .numerics import FLOAT


def supports_batched(cfg: CellConfig) -> bool:
    return inner_kind(cfg.kind) == "rnn"


@dataclass
class BatchCache:
    """Stacked forward activations for one batch: shapes (B, T, ...)."""

    cfg: CellConfig
    xs: np.ndarray
    h: np.ndarray
    h_tilde: np.ndarray
    gate: np.ndarray
    h_d: np.ndarray


def batched_forward(
    params: CellParams,
    cfg: CellConfig,
    xs: np.ndarray,
    theta: float = 0.0,
    want_cache: bool = False,
) -> tuple[np.ndarray, Optional[BatchCache], int]:
    """Forward a (B, T, M) batch; returns (hiddens, cache, open-gate total).

    The open-gate total counts gates that survive thresholding, summed over
    every batch element and step (all ``n`` count as open when theta == 0).
    Caching forces theta = 0 because cached runs feed training.
    """
    if not isinstance(params.inner, RnnParams):
        raise TypeError("batched kernels require a plain recurrent candidate")
    if want_cache and theta != 0.0:
        raise ValueError("cached forward passes are never thresholded")
    xs = np.asarray(xs, dtype=FLOAT)
    batch, steps, _ = xs.shape
    n_hid, n_del, dil = cfg.hidden_dim, cfg.num_delays, cfg.dilation
    length = cfg.window_len
    inner, delay = params.inner, params.delay
    act = activation_fn(cfg.g_activation)

    feed = xs @ inner.w_h.T
    gfeed = xs @ delay.w_d.T if n_del else None
    h = np.zeros((batch, n_hid), dtype=FLOAT)
    h_d = np.zeros((batch, n_del), dtype=FLOAT)
    window = np.zeros((length, batch, n_hid), dtype=FLOAT)
    tap_rows = np.arange(n_del) * dil + (dil - 1)

    hs = np.empty((batch, steps, n_hid), dtype=FLOAT)
    if want_cache:
        h_tildes = np.empty((batch, steps, n_hid), dtype=FLOAT)
        gates = np.empty((batch, steps, n_del), dtype=FLOAT)
        h_ds = np.empty((batch, steps, n_del), dtype=FLOAT)
    open_total = 0

    for t in range(steps):
        h_tilde = act(feed[:, t] + h @ inner.u_h.T + inner.b_h)
        if n_del:
            preact = gfeed[:, t] + h_d @ delay.u_d.T + delay.b_d
            preact -= preact.max(axis=1, keepdims=True)
            e = np.exp(preact)
            d_raw = e / e.sum(axis=1, keepdims=True)
            observe_gate(d_raw)
            h_d = act(preact)
            if theta > 0.0:
                d_dep = np.where(d_raw >= theta, d_raw, 0.0)
                open_total += int(np.count_nonzero(d_dep))
            else:
                d_dep = d_raw
                open_total += n_del * batch
        if length:
            head = t % length
            arrivals = window[head].copy()
            window[head] = 0.0
            rows = ((t + 1) % length + tap_rows) % length
            window[rows] += d_dep.T[:, :, None] * h_tilde[None, :, :]
            h = h_tilde + arrivals
        else:
            h = h_tilde
        hs[:, t] = h
        if want_cache:
            h_tildes[:, t] = h_tilde
            if n_del:
                gates[:, t] = d_raw
                h_ds[:, t] = h_d

    cache = None
    if want_cache:
        cache = BatchCache(cfg=cfg, xs=xs, h=hs, h_tilde=h_tildes, gate=gates, h_d=h_ds)
    return hs, cache, open_total


def batched_backward(
    params: CellParams,
    cfg: CellConfig,
    cache: BatchCache,
    d_h: np.ndarray,
) -> tuple[CellParams, np.ndarray]:
    """Reverse pass over a batch cache; mirrors the per-sequence algorithm."""
    inner, delay = params.inner, params.delay
    batch, steps, n_hid = cache.h.shape
    n_del, dil = cfg.num_delays, cfg.dilation
    act = cfg.g_activation

    g_total = np.empty((batch, steps, n_hid), dtype=FLOAT)
    dz = np.empty((batch, steps, n_hid), dtype=FLOAT)
    da = np.zeros((batch, steps, n_del), dtype=FLOAT)
    carry_h = np.zeros((batch, n_hid), dtype=FLOAT)
    carry_hd = np.zeros((batch, n_del), dtype=FLOAT)
    tap_offsets = dil * np.arange(1, n_del + 1)

    for t in range(steps - 1, -1, -1):
        g = d_h[:, t] + carry_h
        g_total[:, t] = g
        d_cand = g
        if n_del:
            arrive = t + tap_offsets
            valid = arrive < steps
            dd = np.zeros((batch, n_del), dtype=FLOAT)
            if valid.any():
                future = g_total[:, arrive[valid]]  # (B, taps, N)
                d_cand = d_cand + np.einsum("bm,bmn->bn", cache.gate[:, t, valid], future)
                dd[:, valid] = np.einsum("bmn,bn->bm", future, cache.h_tilde[:, t])
            d_t = cache.gate[:, t]
            da_t = d_t * (dd - (dd * d_t).sum(axis=1, keepdims=True))
            da_t += activation_deriv(act, cache.h_d[:, t]) * carry_hd
            da[:, t] = da_t
            carry_hd = da_t @ delay.u_d
        z = activation_deriv(act, cache.h_tilde[:, t]) * d_cand
        dz[:, t] = z
        carry_h = z @ inner.u_h

    h_prev = np.zeros_like(cache.h)
    h_prev[:, 1:] = cache.h[:, :-1]
    xs2 = cache.xs.reshape(batch * steps, -1)
    dz2 = dz.reshape(batch * steps, n_hid)
    hp2 = h_prev.reshape(batch * steps, n_hid)

    grads = zeros_like_params(params)
    grads.inner.w_h += dz2.T @ xs2
    grads.inner.u_h += dz2.T @ hp2
    grads.inner.b_h += dz2.sum(axis=0)
    dxs = dz @ inner.w_h

    if n_del:
        hd_prev = np.zeros_like(cache.h_d)
        hd_prev[:, 1:] = cache.h_d[:, :-1]
        da2 = da.reshape(batch * steps, n_del)
        grads.delay.w_d += da2.T @ xs2
        grads.delay.u_d += da2.T @ hd_prev.reshape(batch * steps, n_del)
        grads.delay.b_d += da2.sum(axis=0)
        dxs = dxs + da @ delay.w_d

    return grads, dxs
