"""Post-training analysis: ablation over latent width, planar fits of latent
states to ground-truth concepts, probes of the learned governing function, and
the R_h / R_f relative-error metrics.

All fits are per grid index: at a fixed time/position x_i the K samples give K
points relating the true concepts to the latent values, and an ordinary
least-squares plane through them tests whether each latent is a linear
combination of the underlying concepts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from .model import ModelParams, control_payload, encode, encoder_input, \
    init_model, make_field, model_config_for
from .odeint import SolverConfig, integrate
from .simulate import newton_rhs, potential_value
from .train import TrainConfig, TrainingDiverged, evaluate, fit

__all__ = [
    "AblationCurve",
    "LinearFit",
    "FitReport",
    "AnalysisError",
    "DegenerateFit",
    "run_ablation",
    "select_latent_dim",
    "fit_latent_linear",
    "probe_governing",
    "relative_errors",
    "latent_metrics",
    "truth_features",
    "model_trajectories",
    "independence_report",
    "default_dims",
    "write_report",
]


class AnalysisError(RuntimeError):
    pass


class DegenerateFit(AnalysisError):
    """Design matrix is rank-deficient; ``columns`` names the dependent ones."""

    def __init__(self, columns):
        super().__init__(f"degenerate fit: collinear columns {', '.join(columns)}")
        self.columns = list(columns)


# --- ablation -------------------------------------------------------------------


@dataclass
class AblationCurve:
    """Final losses per candidate latent width and the knee-rule choice."""

    dims: list
    mean_losses: list
    std_losses: list
    chosen_dim: int
    knee_factor: float = 2.0
    cell_losses: dict = dc_field(default_factory=dict)  # dim -> list of finals
    failures: list = dc_field(default_factory=list)  # (dim, restart, message)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "mean_losses": list(self.mean_losses),
            "std_losses": list(self.std_losses),
            "chosen_dim": self.chosen_dim,
            "knee_factor": self.knee_factor,
            "cell_losses": {str(d): v for d, v in self.cell_losses.items()},
            "failures": [list(f) for f in self.failures],
        }


def default_dims(system: str) -> list:
    """Candidate latent widths scanned by the published ablations."""
    return [1, 2, 3, 4, 5] if system == "pauli" else [1, 2, 3, 4]


def _knee_choice(dims, means, knee_factor):
    threshold = knee_factor * min(means)
    for d, m in zip(dims, means):
        if m <= threshold:
            return d
    return dims[-1]  # unreachable: the min itself always qualifies


def select_latent_dim(curve: AblationCurve) -> int:
    """Smallest dim whose mean loss is within knee_factor of the best mean."""
    return _knee_choice(curve.dims, curve.mean_losses, curve.knee_factor)


def _cell_seed(base_seed, dim, restart) -> int:
    return int(np.random.SeedSequence([base_seed, dim, restart]).generate_state(1)[0])


def _ablation_cell(payload):
    """One (dim, restart) training cell; module-level so pools can pickle it."""
    dataset, dim, restart, cfg, mode = payload
    seed = _cell_seed(cfg.seed, dim, restart)
    cell_cfg = replace(cfg, seed=seed)
    model = init_model(model_config_for(dataset, dim, mode), seed)
    try:
        trained, _ = fit(model, dataset, cell_cfg)
    except TrainingDiverged as err:
        return dim, restart, None, str(err)
    return dim, restart, float(evaluate(trained, dataset, cell_cfg).total), None


def run_ablation(dataset, dims, restarts: int, cfg: TrainConfig,
                 mode: str = "first_order", knee_factor: float = 2.0,
                 on_cell=None, workers: int = 1) -> AblationCurve:
    """Train one model per (latent dim, restart) and pick the knee of the curve.

    Every cell gets a seed derived from (cfg.seed, dim, restart), so the whole
    scan is reproducible and the result does not depend on cell order or on
    ``workers`` (> 1 fans the cells out over a process pool). Cells whose
    training diverges are recorded as failures; each dim needs at least one
    survivor.
    """
    dims = sorted(int(d) for d in dims)
    if not dims:
        raise ValueError("dims must be non-empty")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if workers < 1:
        raise ValueError("workers must be >= 1")

    payloads = [(dataset, d, r, cfg, mode) for d in dims for r in range(restarts)]
    if workers == 1:
        results = []
        for p in payloads:
            res = _ablation_cell(p)
            results.append(res)
            if on_cell is not None:
                on_cell(res[0], res[1], res[2])
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_cell, payloads))
        if on_cell is not None:
            for dim, restart, final, _ in results:
                on_cell(dim, restart, final)

    cell_losses = {d: [] for d in dims}
    failures = []
    for dim, restart, final, message in results:
        if final is None:
            failures.append((dim, restart, message))
        else:
            cell_losses[dim].append(final)

    for d in dims:
        if not cell_losses[d]:
            raise AnalysisError(f"ablation: every restart failed for latent dim {d}")
    means = [float(np.mean(cell_losses[d])) for d in dims]
    stds = [float(np.std(cell_losses[d])) for d in dims]
    chosen = _knee_choice(dims, means, knee_factor)
    return AblationCurve(dims=dims, mean_losses=means, std_losses=stds,
                         chosen_dim=chosen, knee_factor=knee_factor,
                         cell_losses=cell_losses, failures=failures)


# --- least squares ----------------------------------------------------------------


@dataclass
class LinearFit:
    """Per-latent-dimension OLS result against the concept features."""

    coefficients: np.ndarray  # (latent_dim, n_features + 1); intercept last
    r_squared: np.ndarray  # (latent_dim,)
    residual_rms: np.ndarray
    residual_max: np.ndarray
    feature_names: list

    def predict(self, features: np.ndarray) -> np.ndarray:
        X = _design(features)
        return X @ self.coefficients.T


def _design(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    ones = np.ones((features.shape[0], 1))
    if features.shape[1] == 0:
        return ones
    return np.concatenate([features, ones], axis=1)


def _collinear_columns(X, names, tol=1e-10):
    """Names of columns linearly dependent on the columns before them."""
    bad = []
    rank = 0
    for j in range(X.shape[1]):
        r = np.linalg.matrix_rank(X[:, : j + 1], tol=tol * max(1.0, np.abs(X).max()))
        if r == rank:
            bad.append(names[j])
        rank = r
    return bad


def fit_latent_linear(latents, features, feature_names=None) -> LinearFit:
    """OLS plane per latent dimension: latent ~ features + intercept.

    ``latents`` is (K, latent_dim) at one grid index, ``features`` is (K, F)
    of ground-truth concept values at the same index. Raises DegenerateFit
    when the design matrix is rank-deficient.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim == 1:
        latents = latents[:, None]
    X = _design(features)
    n_feat = X.shape[1] - 1
    if feature_names is None:
        feature_names = [f"c{i}" for i in range(n_feat)]
    names = list(feature_names) + ["intercept"]
    if latents.shape[0] != X.shape[0]:
        raise ValueError("latents and features disagree on sample count")
    if X.shape[0] < X.shape[1]:
        raise ValueError("need at least n_features + 1 samples")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DegenerateFit(_collinear_columns(X, names))

    coef, *_ = np.linalg.lstsq(X, latents, rcond=None)
    pred = X @ coef
    resid = latents - pred
    ss_res = np.sum(resid**2, axis=0)
    ss_tot = np.sum((latents - latents.mean(axis=0)) ** 2, axis=0)
    # constant targets: perfect iff the residual is negligible at data scale
    tiny = 1e-20 * max(1.0, float(np.sum(latents**2)))
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = np.where(ss_tot > tiny, 1.0 - ss_res / ss_tot,
                      (ss_res <= tiny).astype(float))
    return LinearFit(
        coefficients=np.ascontiguousarray(coef.T),
        r_squared=np.clip(r2, 0.0, 1.0),
        residual_rms=np.sqrt(np.mean(resid**2, axis=0)),
        residual_max=np.max(np.abs(resid), axis=0),
        feature_names=names,
    )


def _lstsq_predict(features, targets):
    """Min-norm least-squares prediction; tolerant of rank deficiency."""
    X = _design(features)
    coef, *_ = np.linalg.lstsq(X, targets, rcond=None)
    return X @ coef


# --- truth feature sets -------------------------------------------------------------


def _wave_derivatives(ds, idx):
    """Per-sample potential value V(x_idx), shape (K,)."""
    return potential_value(ds.controls.T, ds.meta["potential_offset"], ds.grid[idx])


def truth_features(ds, idx):
    """Ground-truth concept features at grid index ``idx``.

    Returns (h_features, f_features, h_names, f_names): the concepts the
    latents should be linear in, and their derivatives (second derivatives
    substituted from the governing equations) that the learned field should
    be linear in.
    """
    t = ds.truth[:, idx, :]
    system = ds.system
    if system == "copernicus":
        # uniform circular motion: the concept derivatives are constants, so
        # the field probe regresses on the intercept alone
        return t, np.empty((t.shape[0], 0)), ["phi_e", "phi_m"], []
    if system == "newton":
        r, rdot = t[:, 0], t[:, 1]
        rddot = newton_rhs(r, ds.controls[:, 0])
        return (t, np.stack([rdot, rddot], axis=1),
                ["r", "dr_dt"], ["dr_dt", "d2r_dt2"])
    if system == "schrodinger":
        psi, dpsi = t[:, 0], t[:, 1]
        v = _wave_derivatives(ds, idx)
        return (t, np.stack([dpsi, v * psi], axis=1),
                ["psi", "dpsi_dx"], ["dpsi_dx", "d2psi_dx2"])
    if system == "pauli":
        p1, d1, p2, d2 = t[:, 0], t[:, 1], t[:, 2], t[:, 3]
        v = _wave_derivatives(ds, idx)
        b = ds.meta["b_field"]
        f = np.stack([d1, (v + b) * p1, d2, (v - b) * p2], axis=1)
        return (t, f,
                ["psi1", "dpsi1_dx", "psi2", "dpsi2_dx"],
                ["dpsi1_dx", "d2psi1_dx2", "dpsi2_dx", "d2psi2_dx2"])
    raise ValueError(f"unknown system {system!r}")


# --- model-side trajectories ----------------------------------------------------------


def model_trajectories(model: ModelParams, ds, rel_tol=1e-6, abs_tol=1e-6):
    """Latent states and learned-field values along every sample's rollout.

    Returns (states, field_values), both (I, K, latent_dim).
    """
    control = control_payload(ds)
    mu, _ = encode(model, encoder_input(ds))
    cfg = SolverConfig(dense_grid=ds.grid, rel_tol=rel_tol, abs_tol=abs_tol)
    field = make_field(model)
    states = integrate(field, mu, cfg, control=control)
    fvals = np.stack([field(ds.grid[i], states[i], control)
                      for i in range(ds.grid.size)])
    return states, fvals


def probe_governing(model: ModelParams, ds, indices, states=None, fvals=None):
    """Strict per-index OLS of the learned field against the true derivative
    features; returns {index: LinearFit}."""
    if states is None or fvals is None:
        states, fvals = model_trajectories(model, ds)
    out = {}
    for idx in indices:
        _, f_feats, _, f_names = truth_features(ds, idx)
        out[idx] = fit_latent_linear(fvals[idx], f_feats, f_names)
    return out


# --- relative error metrics -------------------------------------------------------------


def relative_errors(values, predictions, m: int, n: int):
    """Mean relative L2 error over the first m grid indices and n dims.

    ``values`` and ``predictions`` are (I, K, >=n). Each term compares the
    K-sample vector at one (index, dim) pair. Zero-norm denominators are
    skipped; returns (metric, skipped_count) with the mean taken over the
    included terms.
    """
    values = np.asarray(values, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if values.shape != predictions.shape:
        raise ValueError("values and predictions must have the same shape")
    if m > values.shape[0] or n > values.shape[2]:
        raise ValueError("m or n exceeds the available indices/dims")
    total = 0.0
    skipped = 0
    for i in range(m):
        for j in range(n):
            denom = np.linalg.norm(values[i, :, j])
            if denom == 0.0:
                skipped += 1
                continue
            total += np.linalg.norm(values[i, :, j] - predictions[i, :, j]) / denom
    included = m * n - skipped
    if included == 0:
        raise AnalysisError("all terms had zero-norm denominators")
    return total / included, skipped


def latent_metrics(model: ModelParams, ds, m=None, n=None, states=None, fvals=None):
    """R_h and R_f for a trained model on its dataset.

    Per grid index, the latents (and the learned field values) are fitted
    against the true concept features (their derivatives) by min-norm least
    squares, and the relative L2 errors of those planar predictions are
    averaged over the first m indices and n latent dims. Returns a dict with
    the metrics, skip counts, and per-index means.
    """
    if states is None or fvals is None:
        states, fvals = model_trajectories(model, ds)
    I = ds.grid.size
    m = I if m is None else int(m)
    n = model.latent_dim if n is None else int(n)

    h_pred = np.empty_like(states)
    f_pred = np.empty_like(fvals)
    for i in range(m):
        h_feats, f_feats, _, _ = truth_features(ds, i)
        h_pred[i] = _lstsq_predict(h_feats, states[i])
        f_pred[i] = _lstsq_predict(f_feats, fvals[i])

    r_h, skip_h = relative_errors(states[:, :, :n], h_pred[:, :, :n], m, n)
    r_f, skip_f = relative_errors(fvals[:, :, :n], f_pred[:, :, :n], m, n)

    def per_index(vals, preds):
        rows = []
        for i in range(m):
            terms = []
            for j in range(n):
                denom = np.linalg.norm(vals[i, :, j])
                if denom == 0.0:
                    continue
                terms.append(np.linalg.norm(vals[i, :, j] - preds[i, :, j]) / denom)
            rows.append(float(np.mean(terms)) if terms else np.nan)
        return rows

    return {
        "m": m, "n": n,
        "r_h": float(r_h), "r_f": float(r_f),
        "skipped_h": skip_h, "skipped_f": skip_f,
        "per_index_h": per_index(states, h_pred),
        "per_index_f": per_index(fvals, f_pred),
    }


# --- second-order independence -----------------------------------------------------------


def independence_report(model: ModelParams, ds, states=None, fvals=None):
    """How cleanly each learned acceleration follows its own concept's second
    derivative (second-order models only).

    Pools all grid indices and samples, standardizes features and outputs, and
    regresses each acceleration output on the full derivative feature set. The
    ``ratio`` per output is max |cross coefficient| / |primary coefficient|,
    where the primary is the strongest second-derivative feature. Reported,
    not asserted: some systems are expected not to decouple.
    """
    if model.mode != "second_order":
        raise ValueError("independence_report applies to second_order models")
    if states is None or fvals is None:
        states, fvals = model_trajectories(model, ds)
    I = ds.grid.size

    feats, names = [], None
    for i in range(I):
        _, f_feats, _, f_names = truth_features(ds, i)
        feats.append(f_feats)
        names = f_names
    feats = np.concatenate(feats, axis=0)  # (I*K, F)
    accel = fvals[:, :, 1::2].reshape(-1, model.latent_dim // 2)

    keep = [j for j in range(feats.shape[1]) if np.std(feats[:, j]) > 1e-12]
    names = [names[j] for j in keep]
    Z = (feats[:, keep] - feats[:, keep].mean(axis=0)) / feats[:, keep].std(axis=0)
    second = [j for j, nm in enumerate(names) if nm.startswith("d2")]

    outputs = []
    for q in range(accel.shape[1]):
        y = accel[:, q]
        scale = np.std(y)
        y_z = (y - y.mean()) / scale if scale > 1e-12 else y - y.mean()
        coef, *_ = np.linalg.lstsq(_design(Z), y_z, rcond=None)
        coef = coef[:-1]  # drop intercept
        if not second:
            outputs.append({"output": q, "coefficients": dict(zip(names, coef.tolist())),
                            "primary": None, "ratio": np.nan})
            continue
        primary = max(second, key=lambda j: abs(coef[j]))
        cross = [abs(coef[j]) for j in range(len(names)) if j != primary]
        primary_mag = abs(coef[primary])
        ratio = float(max(cross) / primary_mag) if cross and primary_mag > 0 \
            else (np.inf if cross and max(cross) > 0 else 0.0)
        # r2 of the primary-feature-only regression (the clean-decoupling view)
        c1, *_ = np.linalg.lstsq(_design(Z[:, primary]), y_z, rcond=None)
        resid = y_z - _design(Z[:, primary]) @ c1
        ss_tot = float(np.sum((y_z - y_z.mean()) ** 2))
        r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
        outputs.append({
            "output": q,
            "coefficients": dict(zip(names, coef.tolist())),
            "primary": names[primary],
            "primary_coef": float(coef[primary]),
            "max_cross_coef": float(max(cross)) if cross else 0.0,
            "ratio": ratio,
            "r2_primary_only": r2,
        })
    return {"feature_names": names, "outputs": outputs}


# --- report assembly ----------------------------------------------------------------------


@dataclass
class FitReport:
    """Everything the analyze stage knows about one trained model."""

    system: str
    latent_dim: int
    mode: str
    metrics: dict  # latent_metrics output
    probe_indices: list
    probe_r2: dict  # index -> list of per-dim r^2 for the field probe
    latent_r2: dict  # index -> list of per-dim r^2 for the latent fit
    ablation: dict | None = None
    independence: dict | None = None

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "latent_dim": self.latent_dim,
            "mode": self.mode,
            "metrics": self.metrics,
            "probe_indices": list(self.probe_indices),
            "probe_r2": {str(k): v for k, v in self.probe_r2.items()},
            "latent_r2": {str(k): v for k, v in self.latent_r2.items()},
            "ablation": self.ablation,
            "independence": self.independence,
        }


def build_report(model: ModelParams, ds, probe_indices=None,
                 ablation: AblationCurve | None = None) -> FitReport:
    """Run the full analysis battery for one trained model."""
    states, fvals = model_trajectories(model, ds)
    I = ds.grid.size
    if probe_indices is None:
        probe_indices = sorted({round(I * 0.2), round(I * 0.5), round(I * 0.8)})
    metrics = latent_metrics(model, ds, states=states, fvals=fvals)

    latent_r2, probe_r2 = {}, {}
    for idx in probe_indices:
        h_feats, f_feats, h_names, f_names = truth_features(ds, idx)
        try:
            latent_r2[idx] = fit_latent_linear(states[idx], h_feats, h_names).r_squared.tolist()
        except DegenerateFit:
            latent_r2[idx] = None
        try:
            probe_r2[idx] = fit_latent_linear(fvals[idx], f_feats, f_names).r_squared.tolist()
        except DegenerateFit:
            probe_r2[idx] = None

    independence = None
    if model.mode == "second_order":
        independence = independence_report(model, ds, states=states, fvals=fvals)

    return FitReport(
        system=ds.system,
        latent_dim=model.latent_dim,
        mode=model.mode,
        metrics=metrics,
        probe_indices=list(probe_indices),
        probe_r2=probe_r2,
        latent_r2=latent_r2,
        ablation=None if ablation is None else ablation.to_dict(),
        independence=independence,
    )


def write_report(out_dir, report: FitReport, model=None, ds=None) -> None:
    """Serialize a FitReport: report.json, per-index CSV, and plot-data CSVs.

    With ``model`` and ``ds`` given, also emits per-sample scatter data
    (latent vs truth plane, field vs expected) at the probe indices.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))

    with open(out / "per_index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "rel_h", "rel_f"])
        for i, (rh, rf) in enumerate(zip(report.metrics["per_index_h"],
                                         report.metrics["per_index_f"])):
            w.writerow([i, f"{rh:.10g}", f"{rf:.10g}"])

    if report.ablation is not None:
        with open(out / "loss_vs_dim.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dim", "mean_loss", "std_loss"])
            for d, m, s in zip(report.ablation["dims"], report.ablation["mean_losses"],
                               report.ablation["std_losses"]):
                w.writerow([d, f"{m:.10g}", f"{s:.10g}"])

    if model is not None and ds is not None:
        states, fvals = model_trajectories(model, ds)
        for idx in report.probe_indices:
            h_feats, f_feats, h_names, f_names = truth_features(ds, idx)
            h_hat = _lstsq_predict(h_feats, states[idx])
            f_hat = _lstsq_predict(f_feats, fvals[idx])
            with open(out / f"plane_{idx}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                header = h_names + [f"h{j}" for j in range(states.shape[2])] \
                    + [f"h{j}_hat" for j in range(states.shape[2])]
                w.writerow(header)
                for k in range(states.shape[1]):
                    row = list(h_feats[k]) + list(states[idx, k]) + list(h_hat[k])
                    w.writerow([f"{v:.10g}" for v in row])
            with open(out / f"field_{idx}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                header = f_names + [f"f{j}" for j in range(fvals.shape[2])] \
                    + [f"f{j}_hat" for j in range(fvals.shape[2])]
                w.writerow(header)
                for k in range(fvals.shape[1]):
                    row = list(f_feats[k]) + list(fvals[idx, k]) + list(f_hat[k])
                    w.writerow([f"{v:.10g}" for v in row])
