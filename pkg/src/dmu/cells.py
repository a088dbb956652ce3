"""Recurrent cells with an optional gated delay line.

The delayed memory unit (DMU) extends a plain recurrent update with a delay
line of ``n`` taps: at every step a softmax "delay gate" splits the candidate
hidden state across the taps, and tap ``k`` delivers its share ``k * dilation``
steps into the future. Arrivals are added onto the candidate state of the
receiving step. A sliding-window ring buffer stores the scheduled deliveries,
one column per future step.

The same machinery wraps LSTM / GRU / IndRNN candidates ("dmu-lstm" etc.), and
``num_delays == 0`` degenerates to the plain cell. Plain baseline kinds
("rnn", "lstm", "gru", "indrnn") never touch the window code path at all.
"""

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .numerics import FLOAT, DimensionError, init_kaiming, init_kaiming_vec, sigmoid, softmax

PLAIN_KINDS = ("rnn", "lstm", "gru", "indrnn")
DELAYED_KINDS = ("dmu", "dmu-lstm", "dmu-gru", "dmu-indrnn")
CELL_KINDS = PLAIN_KINDS + DELAYED_KINDS

_INNER = {
    "rnn": "rnn",
    "dmu": "rnn",
    "lstm": "lstm",
    "dmu-lstm": "lstm",
    "gru": "gru",
    "dmu-gru": "gru",
    "indrnn": "indrnn",
    "dmu-indrnn": "indrnn",
}


def inner_kind(kind: str) -> str:
    return _INNER[kind]


def is_delayed(kind: str) -> bool:
    return kind in DELAYED_KINDS


@dataclass(frozen=True)
class CellConfig:
    """Static description of one recurrent cell.

    ``num_delays`` is the tap count n of the delay line (0 is legal and turns
    the cell into its plain inner variant), ``dilation`` the stride tau between
    taps, ``gate_threshold`` an inference-only cutoff below which gates are
    forced shut. ``g_activation`` is the candidate nonlinearity; the delay gate
    itself is always a softmax.
    """

    kind: str
    input_dim: int
    hidden_dim: int
    num_delays: int = 0
    dilation: int = 1
    gate_threshold: float = 0.0
    g_activation: str = "tanh"
    h_activation: str = "softmax"

    def __post_init__(self):
        if self.kind not in CELL_KINDS:
            raise ValueError(f"unknown cell kind {self.kind!r}")
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ValueError("input_dim and hidden_dim must be positive")
        if self.num_delays < 0:
            raise ValueError("num_delays must be >= 0")
        if not is_delayed(self.kind) and self.num_delays != 0:
            raise ValueError(f"cell kind {self.kind!r} does not take delays")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if not 0.0 <= self.gate_threshold <= 1.0:
            raise ValueError("gate_threshold must lie in [0, 1]")
        if self.g_activation not in ("tanh", "relu"):
            raise ValueError(f"unsupported candidate activation {self.g_activation!r}")
        if self.h_activation != "softmax":
            raise ValueError("the delay gate activation is fixed to softmax")

    @property
    def window_len(self) -> int:
        return self.num_delays * self.dilation if is_delayed(self.kind) else 0


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class RnnParams:
    w_h: np.ndarray  # (N, M)
    u_h: np.ndarray  # (N, N)
    b_h: np.ndarray  # (N,)


@dataclass
class LstmParams:
    w_i: np.ndarray
    u_i: np.ndarray
    b_i: np.ndarray
    w_f: np.ndarray
    u_f: np.ndarray
    b_f: np.ndarray
    w_o: np.ndarray
    u_o: np.ndarray
    b_o: np.ndarray
    w_z: np.ndarray  # candidate group
    u_z: np.ndarray
    b_z: np.ndarray


@dataclass
class GruParams:
    w_z: np.ndarray  # update gate
    u_z: np.ndarray
    b_z: np.ndarray
    w_r: np.ndarray  # reset gate
    u_r: np.ndarray
    b_r: np.ndarray
    w_c: np.ndarray  # candidate
    u_c: np.ndarray
    b_c: np.ndarray


@dataclass
class IndRnnParams:
    w_h: np.ndarray  # (N, M)
    u_h: np.ndarray  # (N,) elementwise recurrence
    b_h: np.ndarray  # (N,)


@dataclass
class DelayParams:
    """Shared affine map feeding both the delay gate and the delay hidden state."""

    w_d: np.ndarray  # (n, M)
    u_d: np.ndarray  # (n, n)
    b_d: np.ndarray  # (n,)


InnerParams = Union[RnnParams, LstmParams, GruParams, IndRnnParams]


@dataclass
class CellParams:
    """All learnable tensors of one cell: inner groups plus the delay group."""

    inner: InnerParams
    delay: DelayParams


@dataclass
class CellState:
    """Mutable per-sequence state: hidden vectors plus the delivery window.

    ``window`` is a ring buffer of ``num_delays * dilation`` rows; the row at
    ``step % len`` holds the arrivals for the upcoming step. ``c`` is the LSTM
    cell state and None for other inner kinds.
    """

    h: np.ndarray
    h_d: np.ndarray
    window: np.ndarray
    step: int = 0
    c: Optional[np.ndarray] = None

    def clone(self) -> "CellState":
        return CellState(
            h=self.h.copy(),
            h_d=self.h_d.copy(),
            window=self.window.copy(),
            step=self.step,
            c=None if self.c is None else self.c.copy(),
        )


@dataclass
class StepOutput:
    """Per-step observables: composite hidden state, candidate, and gate."""

    h: np.ndarray
    h_tilde: np.ndarray
    gate: np.ndarray  # as deposited (post-threshold when a threshold is active)
    gate_preact: np.ndarray
    open_count: int


# ---------------------------------------------------------------------------
# parameter bookkeeping


def named_arrays(params, prefix: str = "") -> list[tuple[str, np.ndarray]]:
    """Flatten a (possibly nested) params dataclass into (name, array) pairs.

    Order follows field declaration order, so it is identical across runs and
    usable for optimizers, checkpoints, and gradient flattening.
    """
    out = []
    for f in dataclasses.fields(params):
        value = getattr(params, f.name)
        name = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.extend(named_arrays(value, prefix=f"{name}."))
        elif isinstance(value, np.ndarray):
            out.append((name, value))
        else:
            raise TypeError(f"unexpected field {name!r} of type {type(value)}")
    return out


def _map_arrays(params, fn: Callable[[np.ndarray], np.ndarray]):
    kwargs = {}
    for f in dataclasses.fields(params):
        value = getattr(params, f.name)
        if dataclasses.is_dataclass(value):
            kwargs[f.name] = _map_arrays(value, fn)
        else:
            kwargs[f.name] = fn(value)
    return type(params)(**kwargs)


def zeros_like_params(params):
    """Structurally identical container with all-zero arrays (gradient set)."""
    return _map_arrays(params, np.zeros_like)


def clone_params(params):
    return _map_arrays(params, np.copy)


def add_params(dst, src):
    """In-place ``dst += src`` over matching parameter containers."""
    for (_, a), (_, b) in zip(named_arrays(dst), named_arrays(src)):
        a += b
    return dst


def scale_params(params, factor: float):
    for _, a in named_arrays(params):
        a *= factor
    return params


def num_scalars(params) -> int:
    return sum(int(a.size) for _, a in named_arrays(params))


# ---------------------------------------------------------------------------
# closed-form parameter counts


def count_params(kind: str, input_dim: int, hidden_dim: int, num_delays: int = 0) -> int:
    """Exact learnable-scalar count for a cell of the given kind and shape."""
    if kind not in CELL_KINDS:
        raise ValueError(f"unknown cell kind {kind!r}")
    m, n_hid, n_del = input_dim, hidden_dim, num_delays
    base = n_hid * n_hid + m * n_hid + n_hid
    inner = {
        "rnn": base,
        "lstm": 4 * base,
        "gru": 3 * base,
        "indrnn": m * n_hid + 2 * n_hid,
    }[inner_kind(kind)]
    delta = m * n_del + n_del * n_del + n_del if is_delayed(kind) else 0
    return inner + delta


# ---------------------------------------------------------------------------
# initialization


def init_cell_params(rng: np.random.Generator, cfg: CellConfig) -> CellParams:
    """Kaiming-normal initialization of every weight and bias group.

    Fan-in is the second dimension of each matrix (inputs feeding one unit);
    biases use the hidden fan-in of their group.
    """
    m, n_hid, n_del = cfg.input_dim, cfg.hidden_dim, cfg.num_delays

    def group(rows):
        w = init_kaiming(rng, rows, m, m)
        u = init_kaiming(rng, rows, rows, rows)
        b = init_kaiming_vec(rng, rows, rows)
        return w, u, b

    ik = inner_kind(cfg.kind)
    if ik == "rnn":
        inner = RnnParams(*group(n_hid))
    elif ik == "lstm":
        gi, gf, go, gz = group(n_hid), group(n_hid), group(n_hid), group(n_hid)
        inner = LstmParams(*gi, *gf, *go, *gz)
    elif ik == "gru":
        gz, gr, gc = group(n_hid), group(n_hid), group(n_hid)
        inner = GruParams(*gz, *gr, *gc)
    else:
        inner = IndRnnParams(
            init_kaiming(rng, n_hid, m, m),
            init_kaiming_vec(rng, n_hid, n_hid),
            init_kaiming_vec(rng, n_hid, n_hid),
        )

    if n_del > 0:
        w_d = init_kaiming(rng, n_del, m, m)
        u_d = init_kaiming(rng, n_del, n_del, n_del)
        b_d = init_kaiming_vec(rng, n_del, n_del)
    else:
        w_d = np.zeros((0, m), dtype=FLOAT)
        u_d = np.zeros((0, 0), dtype=FLOAT)
        b_d = np.zeros(0, dtype=FLOAT)
    return CellParams(inner=inner, delay=DelayParams(w_d, u_d, b_d))


def reset_state(cfg: CellConfig) -> CellState:
    """All-zero state; the delivery window starts empty by contract."""
    n_hid = cfg.hidden_dim
    return CellState(
        h=np.zeros(n_hid, dtype=FLOAT),
        h_d=np.zeros(cfg.num_delays, dtype=FLOAT),
        window=np.zeros((cfg.window_len, n_hid), dtype=FLOAT),
        step=0,
        c=np.zeros(n_hid, dtype=FLOAT) if inner_kind(cfg.kind) == "lstm" else None,
    )


def window_by_arrival(state: CellState) -> np.ndarray:
    """Window rows reordered so row j holds the arrivals j+1 steps ahead."""
    length = state.window.shape[0]
    if length == 0:
        return state.window.copy()
    head = state.step % length
    return np.roll(state.window, -head, axis=0)


# ---------------------------------------------------------------------------
# gate instrumentation

_gate_observer: Optional[Callable[[np.ndarray], None]] = None


def set_gate_observer(fn: Optional[Callable[[np.ndarray], None]]):
    """Install a hook that sees every raw softmax gate vector (or batch of
    them) produced by a forward step. Returns the previously installed hook."""
    global _gate_observer
    previous = _gate_observer
    _gate_observer = fn
    return previous


def observe_gate(d: np.ndarray):
    if _gate_observer is not None and d.size:
        _gate_observer(d)


# ---------------------------------------------------------------------------
# stepping


def apply_gate_threshold(d: np.ndarray, theta: float) -> tuple[np.ndarray, int]:
    """Zero every gate below ``theta``; also report how many stay open."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    out = np.where(d >= theta, d, 0.0)
    return out, int(np.count_nonzero(out))


def activation_fn(name: str):
    return np.tanh if name == "tanh" else (lambda z: np.maximum(z, 0.0))


def activation_deriv(name: str, activated: np.ndarray) -> np.ndarray:
    """Derivative of the candidate nonlinearity expressed via its output."""
    if name == "tanh":
        return 1.0 - activated * activated
    return (activated > 0.0).astype(FLOAT)


def _candidate(inner: InnerParams, cfg: CellConfig, state: CellState, x: np.ndarray, collect: bool):
    """Inner-cell candidate: returns (h_tilde, new_c, extras-for-backprop)."""
    act = activation_fn(cfg.g_activation)
    h_prev = state.h
    if isinstance(inner, RnnParams):
        return act(inner.w_h @ x + inner.u_h @ h_prev + inner.b_h), None, None
    if isinstance(inner, IndRnnParams):
        return act(inner.w_h @ x + inner.u_h * h_prev + inner.b_h), None, None
    if isinstance(inner, LstmParams):
        gi = sigmoid(inner.w_i @ x + inner.u_i @ h_prev + inner.b_i)
        gf = sigmoid(inner.w_f @ x + inner.u_f @ h_prev + inner.b_f)
        go = sigmoid(inner.w_o @ x + inner.u_o @ h_prev + inner.b_o)
        gz = np.tanh(inner.w_z @ x + inner.u_z @ h_prev + inner.b_z)
        c = gf * state.c + gi * gz
        tc = np.tanh(c)
        extras = {"gi": gi, "gf": gf, "go": go, "gz": gz, "tanh_c": tc} if collect else None
        return go * tc, c, extras
    if isinstance(inner, GruParams):
        gz = sigmoid(inner.w_z @ x + inner.u_z @ h_prev + inner.b_z)
        gr = sigmoid(inner.w_r @ x + inner.u_r @ h_prev + inner.b_r)
        cand = np.tanh(inner.w_c @ x + inner.u_c @ (gr * h_prev) + inner.b_c)
        extras = {"gz": gz, "gr": gr, "cand": cand} if collect else None
        return (1.0 - gz) * h_prev + gz * cand, None, extras
    raise TypeError(f"unknown inner params {type(inner)}")


def step_with_extras(
    params: CellParams,
    cfg: CellConfig,
    state: CellState,
    x: np.ndarray,
    theta: Optional[float] = None,
    collect: bool = False,
) -> tuple[CellState, StepOutput, Optional[dict]]:
    """One cell step; optionally collects inner activations for backprop.

    Order of operations for delayed kinds: candidate update, delay gate from
    the shared pre-activation, pop this step's arrivals from the window,
    deposit the gated candidate at offsets k * dilation, and emit
    h = candidate + arrivals. ``theta`` overrides the config threshold.
    """
    x = np.asarray(x, dtype=FLOAT)
    if x.shape != (cfg.input_dim,):
        raise DimensionError(f"input has shape {x.shape}, expected ({cfg.input_dim},)")
    if state.h.shape != (cfg.hidden_dim,):
        raise DimensionError("state does not match the configured hidden size")
    theta = cfg.gate_threshold if theta is None else theta
    if not 0.0 <= theta <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")

    h_tilde, c_new, extras = _candidate(params.inner, cfg, state, x, collect)

    if not is_delayed(cfg.kind):
        new = CellState(h=h_tilde, h_d=state.h_d, window=state.window, step=state.step + 1, c=c_new)
        empty = np.zeros(0, dtype=FLOAT)
        out = StepOutput(h=h_tilde, h_tilde=h_tilde, gate=empty, gate_preact=empty, open_count=0)
        return new, out, extras

    n_del = cfg.num_delays
    if n_del > 0:
        preact = params.delay.w_d @ x + params.delay.u_d @ state.h_d + params.delay.b_d
        d_raw = softmax(preact)
        observe_gate(d_raw)
        h_d_new = activation_fn(cfg.g_activation)(preact)
        if theta > 0.0:
            d_dep, open_count = apply_gate_threshold(d_raw, theta)
        else:
            d_dep, open_count = d_raw, n_del
    else:
        preact = np.zeros(0, dtype=FLOAT)
        d_raw = d_dep = np.zeros(0, dtype=FLOAT)
        h_d_new = state.h_d
        open_count = 0

    window = state.window
    length = window.shape[0]
    if length > 0:
        window = window.copy()
        head = state.step % length
        arrivals = window[head].copy()
        window[head] = 0.0
        head = (head + 1) % length
        rows = (head + np.arange(n_del) * cfg.dilation + (cfg.dilation - 1)) % length
        window[rows] += d_dep[:, None] * h_tilde[None, :]
    else:
        arrivals = np.zeros(cfg.hidden_dim, dtype=FLOAT)

    h = h_tilde + arrivals
    new = CellState(h=h, h_d=h_d_new, window=window, step=state.step + 1, c=c_new)
    out = StepOutput(h=h, h_tilde=h_tilde, gate=d_dep, gate_preact=preact, open_count=open_count)
    return new, out, extras


def cell_step(
    params: CellParams,
    cfg: CellConfig,
    state: CellState,
    x: np.ndarray,
    theta: Optional[float] = None,
) -> tuple[CellState, StepOutput]:
    """Advance one step (see :func:`step_with_extras` for the semantics)."""
    new, out, _ = step_with_extras(params, cfg, state, x, theta=theta, collect=False)
    return new, out


def run_sequence(
    params: CellParams,
    cfg: CellConfig,
    xs: np.ndarray,
    theta: Optional[float] = None,
) -> tuple[np.ndarray, list[StepOutput]]:
    """Step a whole (T, M) sequence from a fresh state; returns (T, N) hiddens."""
    xs = np.asarray(xs, dtype=FLOAT)
    state = reset_state(cfg)
    outputs = []
    hs = np.empty((xs.shape[0], cfg.hidden_dim), dtype=FLOAT)
    for t in range(xs.shape[0]):
        state, out = cell_step(params, cfg, state, xs[t], theta=theta)
        hs[t] = out.h
        outputs.append(out)
    return hs, outputs
