"""Exact reverse-mode backpropagation through time for every cell kind.

The forward pass records per-step activations into a :class:`SequenceCache`;
the backward pass walks the sequence in reverse and accumulates parameter
gradients. For delayed cells four coupled paths are handled:

* the ordinary recurrent path  h_{t-1} -> candidate_t,
* the delay-line path          candidate_i -> h_{i + k*dilation}, weighted by
  the deposited gate value,
* the gate path                h_{i + k*dilation} -> gate_i[k] -> delay
  parameters, through the exact softmax Jacobian,
* the delay-hidden recurrence  h^d_{t-1} -> gate pre-activation_t.

Because steps later than t are finished before t is processed, the full
gradient with respect to each composite hidden state is known by the time its
delay-line contributions to earlier candidates are gathered.

Also here: cross-entropy losses for the two sequence decoding modes (final
step, time-averaged readout) and per-step labels, plus a central finite
difference checker used as the independent oracle for all of the above.
"""

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .cells import (
    CellConfig,
    CellParams,
    GruParams,
    IndRnnParams,
    LstmParams,
    RnnParams,
    activation_deriv,
    clone_params,
    named_arrays,
    reset_state,
    step_with_extras,
    zeros_like_params,
)
from .numerics import FLOAT, DimensionError, softmax

DECODE_MODES = ("last", "all", "per_step")


@dataclass
class SequenceCache:
    """Everything the backward pass needs from one forward run.

    Arrays are stacked over time: shapes (T, N) for hidden quantities and
    (T, n) for gate quantities. ``extra`` holds inner-cell activations for
    LSTM/GRU candidates. Deposits always use the raw softmax gates here; the
    cache is a training-path artifact and thresholding is inference-only.
    """

    cfg: CellConfig
    xs: np.ndarray
    h: np.ndarray
    h_tilde: np.ndarray
    arrivals: np.ndarray
    gate: np.ndarray
    gate_preact: np.ndarray
    h_d: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.xs.shape[0]


def forward_cache_sequence(params: CellParams, cfg: CellConfig, xs: np.ndarray) -> SequenceCache:
    """Run the cell over a (T, M) sequence recording a step-by-step cache.

    The arithmetic is the exact step implementation, so cached and uncached
    forward passes agree bit for bit. Gates are never thresholded here.
    """
    xs = np.asarray(xs, dtype=FLOAT)
    if xs.ndim != 2 or xs.shape[1] != cfg.input_dim:
        raise DimensionError(f"inputs must be (T, {cfg.input_dim}), got {xs.shape}")
    steps = xs.shape[0]
    if steps < 1:
        raise DimensionError("sequence must contain at least one step")

    state = reset_state(cfg)
    n_hid, n_del = cfg.hidden_dim, cfg.num_delays
    h = np.empty((steps, n_hid), dtype=FLOAT)
    h_tilde = np.empty((steps, n_hid), dtype=FLOAT)
    arrivals = np.empty((steps, n_hid), dtype=FLOAT)
    gate = np.empty((steps, n_del), dtype=FLOAT)
    gate_preact = np.empty((steps, n_del), dtype=FLOAT)
    h_d = np.empty((steps, n_del), dtype=FLOAT)
    extra_lists: dict[str, list] = {}

    for t in range(steps):
        state, out, extras = step_with_extras(params, cfg, state, xs[t], theta=0.0, collect=True)
        h[t] = out.h
        h_tilde[t] = out.h_tilde
        arrivals[t] = out.h - out.h_tilde
        if n_del:
            gate[t] = out.gate
            gate_preact[t] = out.gate_preact
            h_d[t] = state.h_d
        if extras:
            if not extra_lists:
                extra_lists = {k: [] for k in extras}
            for k, v in extras.items():
                extra_lists[k].append(v)
        if state.c is not None:
            extra_lists.setdefault("c", []).append(state.c)

    extra = {k: np.stack(v) for k, v in extra_lists.items()}
    return SequenceCache(
        cfg=cfg,
        xs=xs,
        h=h,
        h_tilde=h_tilde,
        arrivals=arrivals,
        gate=gate,
        gate_preact=gate_preact,
        h_d=h_d,
        extra=extra,
    )


def _shifted(a: np.ndarray) -> np.ndarray:
    """Previous-step view: row t holds a[t-1], row 0 is zeros."""
    out = np.zeros_like(a)
    out[1:] = a[:-1]
    return out


def backward_sequence(
    params: CellParams,
    cfg: CellConfig,
    cache: SequenceCache,
    d_h: np.ndarray,
) -> tuple[CellParams, np.ndarray]:
    """Reverse-mode gradients for one sequence.

    ``d_h`` is the loss gradient with respect to every composite hidden state
    (zeros wherever the loss does not touch a step). Returns a parameter-shaped
    gradient container and the (T, M) gradient with respect to the inputs.
    Neither the cache nor the parameters are modified.
    """
    d_h = np.asarray(d_h, dtype=FLOAT)
    steps = len(cache)
    n_hid, n_del, dil = cfg.hidden_dim, cfg.num_delays, cfg.dilation
    if d_h.shape != (steps, n_hid):
        raise DimensionError(f"d_h must be ({steps}, {n_hid}), got {d_h.shape}")

    inner = params.inner
    act = cfg.g_activation
    g_total = np.empty((steps, n_hid), dtype=FLOAT)
    da_buf = np.zeros((steps, n_del), dtype=FLOAT)
    carry_hd = np.zeros(n_del, dtype=FLOAT)
    carry_h = np.zeros(n_hid, dtype=FLOAT)
    tap_offsets = dil * np.arange(1, n_del + 1)

    if isinstance(inner, LstmParams):
        dz_i = np.empty((steps, n_hid), dtype=FLOAT)
        dz_f = np.empty((steps, n_hid), dtype=FLOAT)
        dz_o = np.empty((steps, n_hid), dtype=FLOAT)
        dz_z = np.empty((steps, n_hid), dtype=FLOAT)
        carry_c = np.zeros(n_hid, dtype=FLOAT)
        c_prev = _shifted(cache.extra["c"])
    elif isinstance(inner, GruParams):
        dz_z = np.empty((steps, n_hid), dtype=FLOAT)
        dz_r = np.empty((steps, n_hid), dtype=FLOAT)
        dz_c = np.empty((steps, n_hid), dtype=FLOAT)
    else:
        dz = np.empty((steps, n_hid), dtype=FLOAT)
    h_prev = _shifted(cache.h)

    for t in range(steps - 1, -1, -1):
        g = d_h[t] + carry_h
        g_total[t] = g
        d_cand = g.copy()

        if n_del:
            dd = np.zeros(n_del, dtype=FLOAT)
            arrive = t + tap_offsets
            valid = arrive < steps
            if valid.any():
                future = g_total[arrive[valid]]  # (taps, N)
                d_cand += cache.gate[t, valid] @ future
                dd[valid] = future @ cache.h_tilde[t]
            d_hd = carry_hd
            d_t = cache.gate[t]
            # exact softmax Jacobian: J^T g = d * (g - g.d)
            da = d_t * (dd - dd @ d_t) + activation_deriv(act, cache.h_d[t]) * d_hd
            da_buf[t] = da
            carry_hd = params.delay.u_d.T @ da

        if isinstance(inner, RnnParams):
            z = activation_deriv(act, cache.h_tilde[t]) * d_cand
            dz[t] = z
            carry_h = inner.u_h.T @ z
        elif isinstance(inner, IndRnnParams):
            z = activation_deriv(act, cache.h_tilde[t]) * d_cand
            dz[t] = z
            carry_h = inner.u_h * z
        elif isinstance(inner, LstmParams):
            gi, gf, go = cache.extra["gi"][t], cache.extra["gf"][t], cache.extra["go"][t]
            gz, tc = cache.extra["gz"][t], cache.extra["tanh_c"][t]
            do = d_cand * tc
            dc = carry_c + d_cand * go * (1.0 - tc * tc)
            di = dc * gz
            df = dc * c_prev[t]
            dgz = dc * gi
            carry_c = dc * gf
            zi = gi * (1.0 - gi) * di
            zf = gf * (1.0 - gf) * df
            zo = go * (1.0 - go) * do
            zz = (1.0 - gz * gz) * dgz
            dz_i[t], dz_f[t], dz_o[t], dz_z[t] = zi, zf, zo, zz
            carry_h = inner.u_i.T @ zi + inner.u_f.T @ zf + inner.u_o.T @ zo + inner.u_z.T @ zz
        else:  # GRU
            gz, gr, cand = cache.extra["gz"][t], cache.extra["gr"][t], cache.extra["cand"][t]
            hp = h_prev[t]
            dgz = d_cand * (cand - hp)
            dcand = d_cand * gz
            dhp = d_cand * (1.0 - gz)
            zc = (1.0 - cand * cand) * dcand
            drh = inner.u_c.T @ zc
            dgr = drh * hp
            dhp = dhp + drh * gr
            zz = gz * (1.0 - gz) * dgz
            zr = gr * (1.0 - gr) * dgr
            dz_z[t], dz_r[t], dz_c[t] = zz, zr, zc
            carry_h = inner.u_z.T @ zz + inner.u_r.T @ zr + dhp

    grads = zeros_like_params(params)
    gi_ = grads.inner
    xs = cache.xs
    if isinstance(inner, RnnParams):
        gi_.w_h += dz.T @ xs
        gi_.u_h += dz.T @ h_prev
        gi_.b_h += dz.sum(axis=0)
        dxs = dz @ inner.w_h
    elif isinstance(inner, IndRnnParams):
        gi_.w_h += dz.T @ xs
        gi_.u_h += (dz * h_prev).sum(axis=0)
        gi_.b_h += dz.sum(axis=0)
        dxs = dz @ inner.w_h
    elif isinstance(inner, LstmParams):
        for z_buf, w, names in (
            (dz_i, inner.w_i, ("w_i", "u_i", "b_i")),
            (dz_f, inner.w_f, ("w_f", "u_f", "b_f")),
            (dz_o, inner.w_o, ("w_o", "u_o", "b_o")),
            (dz_z, inner.w_z, ("w_z", "u_z", "b_z")),
        ):
            getattr(gi_, names[0])[...] += z_buf.T @ xs
            getattr(gi_, names[1])[...] += z_buf.T @ h_prev
            getattr(gi_, names[2])[...] += z_buf.sum(axis=0)
        dxs = dz_i @ inner.w_i + dz_f @ inner.w_f + dz_o @ inner.w_o + dz_z @ inner.w_z
    else:
        reset_h = cache.extra["gr"] * h_prev
        gi_.w_z += dz_z.T @ xs
        gi_.u_z += dz_z.T @ h_prev
        gi_.b_z += dz_z.sum(axis=0)
        gi_.w_r += dz_r.T @ xs
        gi_.u_r += dz_r.T @ h_prev
        gi_.b_r += dz_r.sum(axis=0)
        gi_.w_c += dz_c.T @ xs
        gi_.u_c += dz_c.T @ reset_h
        gi_.b_c += dz_c.sum(axis=0)
        dxs = dz_z @ inner.w_z + dz_r @ inner.w_r + dz_c @ inner.w_c

    if n_del:
        hd_prev = _shifted(cache.h_d)
        grads.delay.w_d += da_buf.T @ xs
        grads.delay.u_d += da_buf.T @ hd_prev
        grads.delay.b_d += da_buf.sum(axis=0)
        dxs = dxs + da_buf @ params.delay.w_d

    return grads, dxs


# ---------------------------------------------------------------------------
# losses


@dataclass
class Readout:
    """Linear classification head applied to hidden states."""

    w: np.ndarray  # (C, N)
    b: np.ndarray  # (C,)

    @property
    def num_classes(self) -> int:
        return self.w.shape[0]


def _cross_entropy(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    p = softmax(logits)
    loss = -float(np.log(p[target]))
    dlogits = p.copy()
    dlogits[target] -= 1.0
    return loss, dlogits


def _check_target(target: int, num_classes: int):
    if not 0 <= int(target) < num_classes:
        raise ValueError(f"target {target} outside [0, {num_classes})")


def sequence_loss(
    mode: str,
    readout: Readout,
    hs: np.ndarray,
    target: int,
) -> tuple[float, np.ndarray, Readout]:
    """Cross-entropy for one sequence under "last" or "all" decoding.

    "last" applies the readout to the final hidden state; "all" averages the
    per-step logits over time before the softmax, so every step receives a
    1/T share of the gradient. Returns (loss, dL/dh per step, readout grads).
    """
    if mode not in ("last", "all"):
        raise ValueError(f"unknown decode mode {mode!r}")
    steps = hs.shape[0]
    _check_target(target, readout.num_classes)
    d_h = np.zeros_like(hs)
    if mode == "last":
        feat = hs[-1]
        loss, dlogits = _cross_entropy(readout.w @ feat + readout.b, int(target))
        d_h[-1] = readout.w.T @ dlogits
    else:
        feat = hs.mean(axis=0)
        loss, dlogits = _cross_entropy(readout.w @ feat + readout.b, int(target))
        d_h[:] = (readout.w.T @ dlogits) / steps
    grads = Readout(w=np.outer(dlogits, feat), b=dlogits.copy())
    return loss, d_h, grads


def per_step_loss(
    readout: Readout,
    hs: np.ndarray,
    targets: np.ndarray,
) -> tuple[float, np.ndarray, Readout]:
    """Summed cross-entropy with one label per step (segmentation decoding)."""
    steps = hs.shape[0]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (steps,):
        raise ValueError(f"need {steps} per-step targets, got shape {targets.shape}")
    if targets.min() < 0 or targets.max() >= readout.num_classes:
        raise ValueError("per-step target outside class range")
    logits = hs @ readout.w.T + readout.b
    p = softmax(logits)
    loss = -float(np.log(p[np.arange(steps), targets]).sum())
    dlogits = p
    dlogits[np.arange(steps), targets] -= 1.0
    d_h = dlogits @ readout.w
    grads = Readout(w=dlogits.T @ hs, b=dlogits.sum(axis=0))
    return loss, d_h, grads


def decode_loss(mode, readout, hs, target):
    """Dispatch ``sequence_loss`` / ``per_step_loss`` on the decode mode."""
    if mode == "per_step":
        return per_step_loss(readout, hs, target)
    return sequence_loss(mode, readout, hs, target)


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    """Per-parameter-group worst relative error of analytic vs numeric grads."""

    eps: float
    tol: float
    group_errors: dict
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    params: CellParams,
    cfg: CellConfig,
    readout: Readout,
    xs: np.ndarray,
    target: Union[int, np.ndarray],
    mode: str = "last",
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare every analytic gradient entry against central differences.

    Each scalar parameter is perturbed by +/- eps, the full forward pass and
    loss are re-evaluated, and (L+ - L-) / (2 eps) is matched against the
    analytic value with relative error max-normalized by
    max(|analytic|, |numeric|, 1e-8). Intended for small instances only.
    """
    work = clone_params(params)
    head = Readout(w=readout.w.copy(), b=readout.b.copy())

    def loss_value() -> float:
        cache = forward_cache_sequence(work, cfg, xs)
        loss, _, _ = decode_loss(mode, head, cache.h, target)
        return loss

    cache = forward_cache_sequence(work, cfg, xs)
    loss, d_h, head_grads = decode_loss(mode, head, cache.h, target)
    cell_grads, _ = backward_sequence(work, cfg, cache, d_h)

    analytic = named_arrays(cell_grads) + [
        ("readout.w", head_grads.w),
        ("readout.b", head_grads.b),
    ]
    tensors = named_arrays(work) + [("readout.w", head.w), ("readout.b", head.b)]

    group_errors = {}
    worst = 0.0
    for (name, grad), (_, tensor) in zip(analytic, tensors):
        err = 0.0
        flat_g = grad.ravel()
        flat_t = tensor.ravel()
        for idx in range(flat_t.size):
            keep = flat_t[idx]
            flat_t[idx] = keep + eps
            upper = loss_value()
            flat_t[idx] = keep - eps
            lower = loss_value()
            flat_t[idx] = keep
            numeric = (upper - lower) / (2.0 * eps)
            denom = max(abs(flat_g[idx]), abs(numeric), 1e-8)
            err = max(err, abs(flat_g[idx] - numeric) / denom)
        group_errors[name] = err
        worst = max(worst, err)

    return GradCheckReport(eps=eps, tol=tol, group_errors=group_errors, max_rel_error=worst)
