"""Adaptive Runge-Kutta integration and the adjoint-method gradient.

The forward solver is the Tsitouras 5(4) embedded pair with PI step-size
control. Output states are produced exactly at the requested grid times by
clipping steps at grid boundaries (no interpolation error at outputs); the
accepted internal steps can additionally be recorded as "knots" so the
backward pass can reconstruct h(t) between checkpoints by cubic Hermite
interpolation instead of re-integrating.

`adjoint_backward` integrates the adjoint state a(t) = dL/dh(t) backwards
across each grid interval, adding the per-time loss cotangents as it crosses
checkpoints, and accumulates the parameter gradient as an augmented quadrature
riding on the same steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

__all__ = [
    "SolverConfig",
    "OdeField",
    "FuncField",
    "ForwardSolution",
    "integrate",
    "integrate_fixed",
    "adjoint_backward",
    "SolverError",
    "SolverDivergence",
    "SolverInstability",
]

# Tsitouras 5(4) tableau. The 7th stage is evaluated at the accepted point
# (FSAL), the 7-entry btilde row is the difference between the 5th- and
# 4th-order weights used for the local error estimate.
_C = np.array([0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0])
_A = (
    (0.161,),
    (-0.008480655492356989, 0.335480655492357),
    (2.8971530571054935, -6.359448489975075, 4.3622954328695815),
    (5.325864828439257, -11.748883564062828, 7.4955393428898365, -0.09249506636175525),
    (
        5.86145544294642,
        -12.92096931784711,
        8.159367898576159,
        -0.071584973281401,
        -0.028269050394068383,
    ),
)
_B = np.array(
    [
        0.09646076681806523,
        0.01,
        0.4798896504144996,
        1.379008574103742,
        -3.290069515436081,
        2.324710524099774,
    ]
)
_BTILDE = np.array(
    [
        -0.001780011052226,
        -0.000816434459657,
        0.007880878010262,
        -0.144711007173263,
        0.582357165452555,
        -0.458082105929187,
        1.0 / 66.0,
    ]
)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_PI_ALPHA = 0.7 / 5.0
_PI_BETA = 0.4 / 5.0


class SolverError(RuntimeError):
    pass


class SolverDivergence(SolverError):
    """Step budget exhausted or step size underflowed."""

    def __init__(self, msg, t):
        super().__init__(f"{msg} (last time reached: {t!r})")
        self.t = t


class SolverInstability(SolverError):
    """State or error estimate became non-finite."""

    def __init__(self, t, rows=None):
        detail = f" in batch rows {rows}" if rows else ""
        super().__init__(f"non-finite state at t={t!r}{detail}")
        self.t = t
        self.rows = rows or []


@dataclass
class SolverConfig:
    """Tolerances, output grid and step budget for one integration."""

    dense_grid: np.ndarray
    rel_tol: float = 1e-6
    abs_tol: float = 1e-6
    max_steps: int = 100_000
    method: str = "tsit5"

    def __post_init__(self):
        self.dense_grid = np.asarray(self.dense_grid, dtype=np.float64)
        if self.method != "tsit5":
            raise ValueError(f"unknown method {self.method!r}")
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        g = self.dense_grid
        if g.ndim != 1 or g.size < 2:
            raise ValueError("dense_grid must be a 1-D array with at least two times")
        if not np.all(np.isfinite(g)):
            raise ValueError("dense_grid contains non-finite times")
        if not np.all(np.diff(g) > 0):
            raise ValueError("dense_grid must be strictly increasing")


class OdeField:
    """Right-hand side callback with optional reverse-mode derivatives.

    Subclasses implement ``__call__(t, h, control)`` returning dh/dt with the
    same shape as ``h``, and — if they participate in training — ``vjp`` giving
    the pullback of a cotangent through the field wrt both state and the flat
    parameter vector.
    """

    n_params = 0

    def __call__(self, t, h, control=None):
        raise NotImplementedError

    def vjp(self, t, h, cotangent, control=None):
        """Return (cotangent @ df/dh, cotangent @ df/dparams)."""
        raise NotImplementedError


class FuncField(OdeField):
    """Wrap a plain function (and optionally its vjp) as an OdeField."""

    def __init__(self, fn, vjp_fn=None, n_params=0):
        self._fn = fn
        self._vjp_fn = vjp_fn
        self.n_params = n_params

    def __call__(self, t, h, control=None):
        return self._fn(t, h)

    def vjp(self, t, h, cotangent, control=None):
        if self._vjp_fn is None:
            raise NotImplementedError("field has no vjp")
        return self._vjp_fn(t, h, cotangent)


@dataclass
class ForwardSolution:
    """States at the grid times, plus (optionally) the accepted-step knots.

    ``knots[i]`` covers grid interval i as three arrays (ts, ys, fs) that
    always include both interval endpoints; they are enough to reconstruct the
    trajectory inside the interval with a C1 cubic Hermite interpolant.
    """

    grid: np.ndarray
    states: np.ndarray
    knots: list | None = dc_field(default=None, repr=False)


def _check_finite(t, y):
    if not np.all(np.isfinite(y)):
        rows = None
        if y.ndim == 2:
            rows = sorted(set(np.argwhere(~np.isfinite(y))[:, 0].tolist()))
        raise SolverInstability(t, rows)


def _error_norm(err, y0, y1, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(rhs, t0, y0, f0, direction, rtol, atol, span):
    """Hairer-style starting step size guess."""
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + direction * h0 * f0
    f1 = rhs(t0 + direction * h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


class _Stepper:
    """Shared adaptive-stepping state across the grid intervals of one solve."""

    def __init__(self, rhs, cfg: SolverConfig, budget=None):
        self.rhs = rhs
        self.rtol = cfg.rel_tol
        self.atol = cfg.abs_tol
        self.steps_left = cfg.max_steps if budget is None else budget
        self.h = None  # running step-size proposal (positive magnitude)
        self.err_prev = 1.0

    def advance(self, t0, t1, y0, f0=None, collect=False):
        """Integrate from t0 to t1 (either direction), return (y1, f1, knots)."""
        rhs = self.rhs
        direction = 1.0 if t1 >= t0 else -1.0
        span = abs(t1 - t0)
        t, y = t0, y0
        f = rhs(t0, y0) if f0 is None else f0
        _check_finite(t0, f)
        if self.h is None:
            self.h = _initial_step(rhs, t0, y0, f, direction, self.rtol, self.atol, span)
        knots = ([t], [y], [f]) if collect else None

        while direction * (t1 - t) > 0:
            if self.steps_left <= 0:
                raise SolverDivergence("step budget exhausted", t)
            self.steps_left -= 1
            h = min(self.h, abs(t1 - t))
            if h < 1e-14 * max(1.0, abs(t)):
                raise SolverDivergence("step size underflow", t)
            hd = direction * h

            k1 = f
            k2 = rhs(t + hd * _C[1], y + hd * (_A[0][0] * k1))
            k3 = rhs(t + hd * _C[2], y + hd * (_A[1][0] * k1 + _A[1][1] * k2))
            k4 = rhs(
                t + hd * _C[3],
                y + hd * (_A[2][0] * k1 + _A[2][1] * k2 + _A[2][2] * k3),
            )
            k5 = rhs(
                t + hd * _C[4],
                y
                + hd
                * (_A[3][0] * k1 + _A[3][1] * k2 + _A[3][2] * k3 + _A[3][3] * k4),
            )
            k6 = rhs(
                t + hd,
                y
                + hd
                * (
                    _A[4][0] * k1
                    + _A[4][1] * k2
                    + _A[4][2] * k3
                    + _A[4][3] * k4
                    + _A[4][4] * k5
                ),
            )
            y_new = y + hd * (
                _B[0] * k1
                + _B[1] * k2
                + _B[2] * k3
                + _B[3] * k4
                + _B[4] * k5
                + _B[5] * k6
            )
            t_new = t1 if h >= abs(t1 - t) * (1 - 1e-12) else t + hd
            k7 = rhs(t_new, y_new)
            err = hd * (
                _BTILDE[0] * k1
                + _BTILDE[1] * k2
                + _BTILDE[2] * k3
                + _BTILDE[3] * k4
                + _BTILDE[4] * k5
                + _BTILDE[5] * k6
                + _BTILDE[6] * k7
            )
            if not (np.all(np.isfinite(y_new)) and np.all(np.isfinite(err))):
                _check_finite(t_new, y_new)
                _check_finite(t_new, err)
            err_norm = max(_error_norm(err, y, y_new, self.rtol, self.atol), 1e-10)

            if err_norm <= 1.0:
                factor = _SAFETY * err_norm ** (-_PI_ALPHA) * self.err_prev ** _PI_BETA
                self.h = h * min(max(factor, _MIN_FACTOR), _MAX_FACTOR)
                self.err_prev = err_norm
                t, y, f = t_new, y_new, k7
                if collect:
                    knots[0].append(t)
                    knots[1].append(y)
                    knots[2].append(f)
            else:
                self.h = h * max(_MIN_FACTOR, _SAFETY * err_norm ** -0.2)

        if collect:
            ts = np.array(knots[0])
            ys = np.stack(knots[1])
            fs = np.stack(knots[2])
            return y, f, (ts, ys, fs)
        return y, f, None


def integrate(field: OdeField, h0, cfg: SolverConfig, control=None, dense=False):
    """Solve dh/dt = field(t, h, control) over cfg.dense_grid.

    Returns the array of states at the grid times, shape (len(grid), *h0.shape),
    or a `ForwardSolution` carrying the accepted-step knots when ``dense=True``.
    The state may be a vector or a (batch, dim) matrix; a batch is advanced
    jointly under a single error control.
    """
    y0 = np.asarray(h0, dtype=np.float64)
    grid = cfg.dense_grid
    rhs = lambda t, y: np.asarray(field(t, y, control), dtype=np.float64)
    stepper = _Stepper(rhs, cfg)

    states = np.empty((grid.size,) + y0.shape, dtype=np.float64)
    states[0] = y0
    all_knots = [] if dense else None
    y, f = y0, None
    for i in range(grid.size - 1):
        y, f, knots = stepper.advance(grid[i], grid[i + 1], y, f0=f, collect=dense)
        states[i + 1] = y
        if dense:
            all_knots.append(knots)
    if dense:
        return ForwardSolution(grid=grid.copy(), states=states, knots=all_knots)
    return states


def integrate_fixed(field: OdeField, h0, t0, t1, n_steps, control=None):
    """Fixed-step Tsit5 (no error control); used for convergence measurements."""
    y = np.asarray(h0, dtype=np.float64)
    rhs = lambda t, yy: np.asarray(field(t, yy, control), dtype=np.float64)
    h = (t1 - t0) / n_steps
    t = t0
    f = rhs(t, y)
    for _ in range(n_steps):
        k1 = f
        k2 = rhs(t + h * _C[1], y + h * (_A[0][0] * k1))
        k3 = rhs(t + h * _C[2], y + h * (_A[1][0] * k1 + _A[1][1] * k2))
        k4 = rhs(t + h * _C[3], y + h * (_A[2][0] * k1 + _A[2][1] * k2 + _A[2][2] * k3))
        k5 = rhs(
            t + h * _C[4],
            y + h * (_A[3][0] * k1 + _A[3][1] * k2 + _A[3][2] * k3 + _A[3][3] * k4),
        )
        k6 = rhs(
            t + h,
            y
            + h
            * (
                _A[4][0] * k1
                + _A[4][1] * k2
                + _A[4][2] * k3
                + _A[4][3] * k4
                + _A[4][4] * k5
            ),
        )
        y = y + h * (
            _B[0] * k1
            + _B[1] * k2
            + _B[2] * k3
            + _B[3] * k4
            + _B[4] * k5
            + _B[5] * k6
        )
        t = t + h
        f = rhs(t, y)
    return y


class _Hermite:
    """C1 cubic Hermite interpolant over one interval's knots."""

    def __init__(self, ts, ys, fs):
        self.ts, self.ys, self.fs = ts, ys, fs

    def __call__(self, t):
        ts = self.ts
        if t <= ts[0]:
            seg = 0
        elif t >= ts[-1]:
            seg = len(ts) - 2
        else:
            seg = int(np.searchsorted(ts, t, side="right") - 1)
        ta, tb = ts[seg], ts[seg + 1]
        dt = tb - ta
        th = (t - ta) / dt
        h00 = (1 + 2 * th) * (1 - th) ** 2
        h10 = th * (1 - th) ** 2
        h01 = th * th * (3 - 2 * th)
        h11 = th * th * (th - 1)
        return (
            h00 * self.ys[seg]
            + h10 * dt * self.fs[seg]
            + h01 * self.ys[seg + 1]
            + h11 * dt * self.fs[seg + 1]
        )


def adjoint_backward(field: OdeField, forward, cotangents, cfg: SolverConfig, control=None):
    """Gradient of sum_i <cotangents[i], h(t_i)> wrt h(t_0) and field parameters.

    ``forward`` is the ForwardSolution of the matching `integrate` call (or any
    object with .grid/.states; intervals without stored knots are re-integrated
    from their left checkpoint). Returns ``(grad_h0, grad_params)``.
    """
    grid = np.asarray(forward.grid, dtype=np.float64)
    states = forward.states
    cots = np.asarray(cotangents, dtype=np.float64)
    if not np.array_equal(grid, cfg.dense_grid):
        raise ValueError("forward solution grid does not match cfg.dense_grid")
    if cots.shape != states.shape:
        raise ValueError("cotangents must have one entry per grid state")
    knots = getattr(forward, "knots", None)

    state_shape = states.shape[1:]
    size = int(np.prod(state_shape))
    n_p = field.n_params
    fwd_rhs = lambda t, y: np.asarray(field(t, y, control), dtype=np.float64)

    a = cots[-1].astype(np.float64).copy()
    gp = np.zeros(n_p, dtype=np.float64)

    # interp is rebound per interval; the steppers (and their running step
    # size proposals) are shared across the whole sweep
    interp = None

    def aug_rhs(t, v):
        av = v[:size].reshape(state_shape)
        h = interp(t)
        gh, gz = field.vjp(t, h, av, control)
        out = np.empty_like(v)
        out[:size] = -np.asarray(gh, dtype=np.float64).ravel()
        if n_p:
            out[size:] = -np.asarray(gz, dtype=np.float64)
        return out

    re_stepper = _Stepper(fwd_rhs, cfg)
    back_stepper = _Stepper(aug_rhs, cfg)

    for i in range(grid.size - 2, -1, -1):
        if knots is not None and knots[i] is not None:
            interp = _Hermite(*knots[i])
        else:
            # re-integrate this interval forward from its checkpoint
            _, _, k = re_stepper.advance(grid[i], grid[i + 1], states[i], collect=True)
            interp = _Hermite(*k)

        v0 = np.concatenate([a.ravel(), gp])
        v, _, _ = back_stepper.advance(grid[i + 1], grid[i], v0)
        a = v[:size].reshape(state_shape) + cots[i]
        if n_p:
            gp = v[size:].copy()

    return a, gp
