"""Loss assembly and the RMSProp -> Adam -> L-BFGS training schedule.

Every optimizer consumes gradients from one shared objective closure built by
``make_objective`` (encoder/decoder backprop plus the adjoint pass through the
latent ODE), so the stochastic phases and the quasi-Newton phase are guaranteed
to optimize the same function. Training is bit-reproducible per seed: batch
shuffles come from per-epoch derived streams and all reductions have fixed
order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, ModelParams, _encode_raw, control_payload, \
    encoder_input, group_slices, make_field, model_from_flat
from .nn import forward as nn_forward, vjp
from .odeint import SolverConfig, SolverError, adjoint_backward, integrate

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "TrainingDiverged",
    "default_train_config",
    "reconstruction_loss",
    "kl_divergence",
    "mre_regularizer",
    "resolve_schedule",
    "make_objective",
    "fit",
    "evaluate",
    "grad_hash",
]

_MRE_DELTA = 1e-8


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``epoch`` records where."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    beta: float = 0.0
    sigma_h: float = 0.1
    batch_size: int = 64
    lr_start: float = 0.01
    lr_end: float = 0.001
    epochs: int = 100
    # phase shares: most of the budget goes to full-batch BFGS, which is what
    # pushes the latents onto planes in the concepts after the stochastic
    # phases have found the right basin
    optimizer_schedule: tuple = (("rmsprop", 0.15), ("adam", 0.15), ("bfgs", 0.70))
    mre_weight: float = 0.0
    seed: int = 0
    rel_tol: float = 1e-7
    abs_tol: float = 1e-9

    def __post_init__(self):
        if self.beta < 0 or self.mre_weight < 0:
            raise ValueError("beta and mre_weight must be >= 0")
        if self.sigma_h <= 0:
            raise ValueError("sigma_h must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.lr_end > self.lr_start:
            raise ValueError("lr_end must not exceed lr_start")
        sched = tuple((str(n), float(s)) for n, s in self.optimizer_schedule)
        for name, share in sched:
            if name not in ("rmsprop", "adam", "bfgs"):
                raise ValueError(f"unknown optimizer {name!r}")
            if share < 0:
                raise ValueError("schedule shares must be >= 0")
        if abs(sum(s for _, s in sched) - 1.0) > 1e-9:
            raise ValueError("schedule shares must sum to 1")
        object.__setattr__(self, "optimizer_schedule", sched)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta, "sigma_h": self.sigma_h,
            "batch_size": self.batch_size,
            "lr_start": self.lr_start, "lr_end": self.lr_end,
            "epochs": self.epochs,
            "optimizer_schedule": [[n, s] for n, s in self.optimizer_schedule],
            "mre_weight": self.mre_weight, "seed": self.seed,
            "rel_tol": self.rel_tol, "abs_tol": self.abs_tol,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["optimizer_schedule"] = tuple((n, s) for n, s in d["optimizer_schedule"])
        return TrainConfig(**d)


# published hyperparameters per system (lr range, beta, epochs); second-order
# rows override where they differ
_TRAIN_TABLE = {
    ("copernicus", "first_order"): dict(lr_start=0.01, lr_end=0.0001, beta=0.01, epochs=3000),
    ("newton", "first_order"): dict(lr_start=0.01, lr_end=0.001, beta=0.0, epochs=2200,
                                    mre_weight=1.0),
    ("newton", "second_order"): dict(lr_start=0.01, lr_end=0.001, beta=0.0, epochs=2200,
                                     mre_weight=1.0),
    ("schrodinger", "first_order"): dict(lr_start=0.01, lr_end=0.001, beta=0.001, epochs=1600),
    ("schrodinger", "second_order"): dict(lr_start=0.01, lr_end=0.001, beta=0.001, epochs=1600),
    ("pauli", "first_order"): dict(lr_start=0.01, lr_end=0.001, beta=0.0001, epochs=2000),
    ("pauli", "second_order"): dict(lr_start=0.01, lr_end=0.001, beta=0.1, epochs=1400),
}


def default_train_config(system: str, mode: str = "first_order",
                         scale: str = "full", seed: int = 0) -> TrainConfig:
    """Published training hyperparameters; desk scale divides epochs by 4."""
    key = (system, mode)
    if key not in _TRAIN_TABLE:
        raise ValueError(f"no published training parameters for {key}")
    kw = dict(_TRAIN_TABLE[key])
    if scale == "desk":
        kw["epochs"] = max(kw["epochs"] // 4, 1)
    elif scale != "full":
        raise ValueError(f"unknown scale {scale!r}")
    return TrainConfig(seed=seed, **kw)


@dataclass(frozen=True)
class LossBreakdown:
    """One epoch's loss terms; ``total`` is the optimized quantity."""

    reconstruction: float
    kl: float
    mre: float
    total: float

    def __post_init__(self):
        for v in (self.reconstruction, self.kl, self.mre, self.total):
            if not np.isfinite(v):
                raise ValueError("loss terms must be finite")

    def to_dict(self) -> dict:
        return {"reconstruction": float(self.reconstruction), "kl": float(self.kl),
                "mre": float(self.mre), "total": float(self.total)}


# --- loss terms -----------------------------------------------------------------


def reconstruction_loss(x, xhat) -> float:
    """Squared error averaged over time points, observed variables and batch."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {xhat.shape}")
    return float(np.mean((x - xhat) ** 2))


def kl_divergence(mu, sigma, sigma_h: float = 0.1) -> float:
    """Batch-mean KL against the N(0, sigma_h^2) prior, constants dropped:
    (1/2) sum_j (mu_j^2/sigma_h^2 + sigma_j^2/sigma_h^2 - log sigma_j^2)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    # log(sigma**2) written as 2 log sigma so subnormal sigma cannot underflow
    per = 0.5 * np.sum(
        (mu**2 + sigma**2) / sigma_h**2 - 2.0 * np.log(sigma), axis=-1
    )
    return float(np.mean(per))


def mre_regularizer(x, xhat) -> float:
    """Mean relative error |x - xhat| / (|x| + delta), guarded near zero."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {xhat.shape}")
    return float(np.mean(np.abs(x - xhat) / (np.abs(x) + _MRE_DELTA)))


def grad_hash(grad: np.ndarray) -> str:
    """Short stable fingerprint of a gradient vector (logged per epoch)."""
    return hashlib.sha256(np.ascontiguousarray(grad).tobytes()).hexdigest()[:16]


# --- the shared objective --------------------------------------------------------


def _slice_control(control, idx):
    if control is None:
        return None
    if isinstance(control, tuple):  # (potential coefficients, offset)
        coeffs, offset = control
        return (coeffs if idx is None else coeffs[idx]), offset
    return control if idx is None else control[idx]


def make_objective(config: ModelConfig, inputs, observations, control, grid,
                   cfg: TrainConfig):
    """Build the loss-and-gradient closure shared by every optimizer phase.

    The returned callable maps (flat parameter vector, optional sample index
    array) to (LossBreakdown, flat gradient). Gradients flow through the
    decoder by backprop, through the latent ODE by the adjoint method, and
    through the encoder by backprop of the combined latent/KL cotangent.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    observations = np.asarray(observations, dtype=np.float64)
    if inputs.ndim != 2 or observations.ndim != 3:
        raise ValueError("expected batched inputs (K, E) and observations (K, I, J)")
    solver_cfg = SolverConfig(dense_grid=grid, rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol)
    slices = group_slices(config)
    sh2 = cfg.sigma_h**2

    def objective(flat, idx=None):
        model = model_from_flat(config, flat)
        x_in = inputs if idx is None else inputs[idx]
        obs = observations if idx is None else observations[idx]
        ctrl = _slice_control(control, idx)
        K = x_in.shape[0]

        # overflow here is an expected transient (e.g. speculative line-search
        # probes); the finiteness guards below turn it into TrainingDiverged
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            mu, log_sigma = _encode_raw(model, x_in)
            sigma = np.exp(log_sigma)
            if np.any(sigma == 0.0) or not np.all(np.isfinite(sigma)):
                raise TrainingDiverged("encoder sigma under/overflow", epoch=None)
            field = make_field(model)
            fwd = integrate(field, mu, solver_cfg, control=ctrl, dense=True)
            states = fwd.states  # (I, K, D)
            I = states.shape[0]

            flat_states = states.reshape(I * K, config.latent_dim)
            xhat = nn_forward(model.decoder, flat_states).reshape(I, K, config.obs_dim)
            x_ref = obs.transpose(1, 0, 2)  # (I, K, J)

            recon = reconstruction_loss(x_ref, xhat)
            kl = kl_divergence(mu, sigma, cfg.sigma_h)
            mre = mre_regularizer(x_ref, xhat)
            total = recon + cfg.beta * kl + cfg.mre_weight * mre
        if not np.isfinite(total):
            raise TrainingDiverged("non-finite loss", epoch=None)
        breakdown = LossBreakdown(recon, kl, mre, total)

        # backward: reconstruction (+ mre) -> decoder -> adjoint -> encoder
        n = x_ref.size
        diff = xhat - x_ref
        dxhat = (2.0 / n) * diff
        if cfg.mre_weight:
            dxhat += cfg.mre_weight * np.sign(diff) / ((np.abs(x_ref) + _MRE_DELTA) * n)

        grad_states, grad_dec = vjp(model.decoder, flat_states,
                                    dxhat.reshape(I * K, config.obs_dim))
        cotangents = grad_states.reshape(I, K, config.latent_dim)
        grad_h0, grad_field = adjoint_backward(field, fwd, cotangents, solver_cfg,
                                               control=ctrl)

        dmu = grad_h0
        dlog_sigma = np.zeros_like(log_sigma)
        if cfg.beta:
            dmu = dmu + cfg.beta * mu / (sh2 * K)
            dlog_sigma = cfg.beta * (sigma**2 / sh2 - 1.0) / K
        _, grad_enc = vjp(model.encoder, x_in,
                          np.concatenate([dmu, dlog_sigma], axis=-1))

        grad = np.empty_like(model.flat)
        grad[slices["encoder"]] = grad_enc
        grad[slices["field"]] = grad_field
        grad[slices["decoder"]] = grad_dec
        return breakdown, grad

    return objective


def dataset_objective(model_config: ModelConfig, ds, cfg: TrainConfig):
    """Objective over a whole Dataset (adapter used by fit/evaluate/CLI)."""
    return make_objective(model_config, encoder_input(ds), ds.observations,
                          control_payload(ds), ds.grid, cfg)


# --- optimizers ------------------------------------------------------------------


class _RmsProp:
    def __init__(self, n, decay=0.9, eps=1e-8):
        self.v = np.zeros(n)
        self.decay = decay
        self.eps = eps

    def step(self, x, g, lr):
        self.v = self.decay * self.v + (1.0 - self.decay) * g * g
        x -= lr * g / (np.sqrt(self.v) + self.eps)


class _Adam:
    def __init__(self, n, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0

    def step(self, x, g, lr):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        x -= lr * mhat / (np.sqrt(vhat) + self.eps)


def _wolfe_line_search(fg, x, f0, g0, d, c1=1e-4, c2=0.9, max_evals=25):
    """Strong-Wolfe line search (bracket + zoom).

    ``fg`` maps a point to (LossBreakdown, gradient); returns
    (alpha, breakdown, gradient) for an accepted step or None on failure.
    """
    dg0 = float(g0 @ d)
    if dg0 >= 0:
        return None

    def phi(alpha):
        # a speculative probe may land where the model cannot even be
        # evaluated (latent blow-up, sigma underflow): treat that as +inf
        try:
            bd, g = fg(x + alpha * d)
        except (TrainingDiverged, SolverError):
            return None, None, np.inf
        return bd, g, float(g @ d)

    a_prev, f_prev, dg_prev = 0.0, f0, dg0
    alpha = 1.0
    evals = 0
    bracket = None
    while evals < max_evals:
        bd, g, dg = phi(alpha)
        f = np.inf if bd is None else bd.total
        evals += 1
        if f > f0 + c1 * alpha * dg0 or (evals > 1 and f >= f_prev):
            bracket = (a_prev, f_prev, dg_prev, alpha, f)
            break
        if abs(dg) <= -c2 * dg0:
            return alpha, bd, g
        if dg >= 0:
            bracket = (alpha, f, dg, a_prev, f_prev)
            break
        a_prev, f_prev, dg_prev = alpha, f, dg
        alpha *= 2.0
        if alpha > 1e6:
            return None
    if bracket is None:
        return None

    lo, f_lo, dg_lo, hi, f_hi = bracket
    while evals < max_evals:
        # quadratic interpolation with a bisection safeguard
        denom = f_hi - f_lo - dg_lo * (hi - lo)
        if np.isfinite(denom) and abs(denom) > 1e-18:
            alpha = lo - 0.5 * dg_lo * (hi - lo) ** 2 / denom
        else:
            alpha = 0.5 * (lo + hi)
        span = abs(hi - lo)
        if not np.isfinite(alpha) or abs(alpha - lo) < 0.05 * span or abs(alpha - hi) < 0.05 * span:
            alpha = lo + 0.5 * (hi - lo)
        bd, g, dg = phi(alpha)
        f = np.inf if bd is None else bd.total
        evals += 1
        if f > f0 + c1 * alpha * dg0 or f >= f_lo:
            hi, f_hi = alpha, f
        else:
            if abs(dg) <= -c2 * dg0:
                return alpha, bd, g
            if dg * (hi - lo) >= 0:
                hi, f_hi = lo, f_lo
            lo, f_lo, dg_lo = alpha, f, dg
        if abs(hi - lo) < 1e-14:
            break
    return None


def _lbfgs_phase(objective, flat, max_iters, history_size=10, on_iter=None):
    """Limited-memory BFGS with strong-Wolfe steps; keeps the best-so-far point.

    Returns (best flat params, list of LossBreakdowns, one per iteration)."""
    breakdown, g = objective(flat, None)
    f = breakdown.total
    best_x, best_f = flat.copy(), f
    s_mem, y_mem = [], []
    history = []

    def fg(x):
        return objective(x, None)

    x = flat.copy()
    for _ in range(max_iters):
        # two-loop recursion for the search direction
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(s_mem), reversed(y_mem)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            alphas.append((a, rho))
            q -= a * y
        if y_mem:
            y_last, s_last = y_mem[-1], s_mem[-1]
            q *= (s_last @ y_last) / (y_last @ y_last)
        for (a, rho), (s, y) in zip(reversed(alphas), zip(s_mem, y_mem)):
            b = rho * (y @ q)
            q += (a - b) * s
        d = -q
        if g @ d >= 0:  # not a descent direction; restart from steepest descent
            s_mem, y_mem = [], []
            d = -g
        result = _wolfe_line_search(fg, x, f, g, d)
        if result is None:
            break
        alpha, bd_new, g_new = result
        x_new = x + alpha * d
        s, y = x_new - x, g_new - g
        if s @ y > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            s_mem.append(s)
            y_mem.append(y)
            if len(s_mem) > history_size:
                s_mem.pop(0)
                y_mem.pop(0)
        x, f, g = x_new, bd_new.total, g_new
        history.append(bd_new)
        if on_iter is not None:
            on_iter(bd_new, g)
        if f < best_f:
            best_x, best_f = x.copy(), f
    return best_x, history


def resolve_schedule(cfg: TrainConfig):
    """Integer epoch counts per phase; counts always sum to cfg.epochs."""
    names = [n for n, _ in cfg.optimizer_schedule]
    shares = [s for _, s in cfg.optimizer_schedule]
    counts = [int(round(s * cfg.epochs)) for s in shares[:-1]]
    counts.append(cfg.epochs - sum(counts))
    if counts[-1] < 0:
        raise ValueError("schedule rounding produced a negative phase length")
    return list(zip(names, counts))


def _lr_schedule(cfg: TrainConfig, n_stochastic: int):
    if n_stochastic <= 1 or cfg.lr_start == 0.0:
        return [cfg.lr_start] * n_stochastic
    ratio = (cfg.lr_end / cfg.lr_start) ** (1.0 / (n_stochastic - 1))
    return [cfg.lr_start * ratio**e for e in range(n_stochastic)]


def fit(model: ModelParams, data, cfg: TrainConfig, on_epoch=None, start_epoch=0):
    """Run the full optimizer schedule on a dataset.

    Returns (trained ModelParams, per-epoch LossBreakdown history). The
    optional ``on_epoch(record)`` callback receives a dict per epoch with the
    phase, learning rate, loss terms, and a gradient fingerprint — the hook the
    CLI uses for its metrics log.

    ``start_epoch`` skips the first epochs of the resolved schedule: epoch
    numbering, learning rates, and shuffle streams all index the absolute
    epoch, so a resumed run continues the original schedule (optimizer
    moments, however, start fresh).
    """
    objective = dataset_objective(model.config, data, cfg)
    return _fit_with_objective(model, data.sample_count, objective, cfg, on_epoch,
                               start_epoch=start_epoch)


def _fit_with_objective(model: ModelParams, sample_count: int, objective,
                        cfg: TrainConfig, on_epoch=None, start_epoch=0):
    if not 0 <= start_epoch <= cfg.epochs:
        raise ValueError("start_epoch must lie in [0, cfg.epochs]")
    phases = resolve_schedule(cfg)
    n_stochastic = sum(n for name, n in phases if name != "bfgs")
    lrs = _lr_schedule(cfg, n_stochastic)

    remaining = []
    skip = start_epoch
    skipped_stochastic = 0
    for name, n in phases:
        take = min(skip, n)
        skip -= take
        if name != "bfgs":
            skipped_stochastic += take
        if n > take:
            remaining.append((name, n - take))
    phases = remaining

    flat = model.flat.copy()
    history = []
    epoch = start_epoch
    sto_epoch = skipped_stochastic

    def emit(phase, lr, breakdown, grad):
        record = {"epoch": epoch, "phase": phase, "lr": lr,
                  "grad_hash": grad_hash(grad), **breakdown.to_dict()}
        if on_epoch is not None:
            on_epoch(record)

    try:
        for phase, n_epochs in phases:
            if n_epochs == 0:
                continue
            if phase == "bfgs":

                def on_iter(bd, g):
                    nonlocal epoch
                    history.append(bd)
                    emit("bfgs", 0.0, bd, g)
                    epoch += 1

                flat, _ = _lbfgs_phase(objective, flat, n_epochs, on_iter=on_iter)
                continue
            opt = _RmsProp(flat.size) if phase == "rmsprop" else _Adam(flat.size)
            for _ in range(n_epochs):
                lr = lrs[sto_epoch]
                perm = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, epoch])
                ).permutation(sample_count)
                terms = np.zeros(3)
                weight = 0
                grad = None
                for lo in range(0, sample_count, cfg.batch_size):
                    idx = perm[lo : lo + cfg.batch_size]
                    breakdown, grad = objective(flat, idx)
                    opt.step(flat, grad, lr)
                    terms += len(idx) * np.array([
                        breakdown.reconstruction, breakdown.kl, breakdown.mre
                    ])
                    weight += len(idx)
                recon, kl, mre = terms / weight
                bd = LossBreakdown(recon, kl, mre,
                                   recon + cfg.beta * kl + cfg.mre_weight * mre)
                history.append(bd)
                emit(phase, lr, bd, grad)
                epoch += 1
                sto_epoch += 1
    except TrainingDiverged as err:
        raise TrainingDiverged(str(err), epoch=epoch) from None
    except SolverError as err:
        raise TrainingDiverged(f"latent integration failed: {err}", epoch=epoch) from err

    return model_from_flat(model.config, flat), history


def evaluate(model: ModelParams, data, cfg: TrainConfig) -> LossBreakdown:
    """Full-dataset loss through the same code path training uses."""
    breakdown, _ = dataset_objective(model.config, data, cfg)(model.flat, None)
    return breakdown
