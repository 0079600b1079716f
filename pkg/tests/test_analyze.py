import json
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conceptode.analyze import (
    AblationCurve,
    AnalysisError,
    DegenerateFit,
    build_report,
    default_dims,
    fit_latent_linear,
    independence_report,
    latent_metrics,
    model_trajectories,
    probe_governing,
    relative_errors,
    run_ablation,
    select_latent_dim,
    truth_features,
    write_report,
)
from conceptode.model import init_model, model_config_for
from conceptode.simulate import (
    SystemSpec,
    gen_newton,
    gen_pauli,
    gen_schrodinger,
    newton_rhs,
    potential_value,
)
from conceptode.train import TrainConfig, TrainingDiverged


def _curve(dims, means, factor=2.0):
    return AblationCurve(dims=list(dims), mean_losses=list(means),
                         std_losses=[0.0] * len(dims), chosen_dim=0,
                         knee_factor=factor)


# --- knee rule -----------------------------------------------------------------


def test_knee_picks_first_dim_within_factor_of_best():
    assert select_latent_dim(_curve([1, 2, 3, 4], [10.0, 1.0, 0.9, 0.85])) == 2


def test_knee_flat_curve_picks_smallest():
    assert select_latent_dim(_curve([1, 2, 3, 4], [1.0, 1.0, 1.0, 1.0])) == 1


def test_knee_single_candidate():
    assert select_latent_dim(_curve([2], [0.37])) == 2


def test_knee_scale_invariance():
    means = [5.0, 0.6, 0.5, 0.52]
    base = select_latent_dim(_curve([1, 2, 3, 4], means))
    scaled = select_latent_dim(_curve([1, 2, 3, 4], [1e3 * m for m in means]))
    assert base == scaled == 2


def test_knee_factor_is_respected():
    # with factor 1.05 only the minimum itself qualifies
    assert select_latent_dim(_curve([1, 2, 3], [2.0, 1.5, 1.0], factor=1.05)) == 3


def test_default_dims():
    assert default_dims("pauli") == [1, 2, 3, 4, 5]
    assert default_dims("newton") == [1, 2, 3, 4]


# --- planar fits ------------------------------------------------------------------


def test_fit_recovers_exact_plane():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(40, 2))
    latents = 2.0 * feats[:, :1] - 0.5 * feats[:, 1:] + 1.0
    fit = fit_latent_linear(latents, feats, ["r", "dr_dt"])
    assert_allclose(fit.coefficients[0], [2.0, -0.5, 1.0], atol=1e-8)
    assert fit.r_squared[0] == pytest.approx(1.0, abs=1e-12)
    assert fit.residual_rms[0] < 1e-10
    assert fit.feature_names == ["r", "dr_dt", "intercept"]


def test_fit_residuals_orthogonal_to_design():
    rng = np.random.default_rng(7)
    feats = rng.normal(size=(60, 3))
    latents = rng.normal(size=(60, 2))
    fit = fit_latent_linear(latents, feats)
    pred = fit.predict(feats)
    resid = latents - pred
    design = np.concatenate([feats, np.ones((60, 1))], axis=1)
    assert np.max(np.abs(design.T @ resid)) < 1e-8


def test_fit_r_squared_affine_invariant():
    rng = np.random.default_rng(11)
    feats = rng.normal(size=(50, 2))
    latents = rng.normal(size=(50, 1))
    r2 = fit_latent_linear(latents, feats).r_squared
    r2_scaled = fit_latent_linear(3.7 * latents - 2.0, feats).r_squared
    assert_allclose(r2, r2_scaled, atol=1e-10)


def test_fit_duplicate_column_raises_and_names_it():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(30, 1))
    feats = np.concatenate([a, 2.0 * a], axis=1)
    with pytest.raises(DegenerateFit) as exc:
        fit_latent_linear(rng.normal(size=(30, 1)), feats, ["a", "b"])
    assert exc.value.columns == ["b"]
    assert "b" in str(exc.value)


def test_fit_constant_feature_collides_with_intercept():
    rng = np.random.default_rng(6)
    feats = np.stack([rng.normal(size=20), np.full(20, 3.0)], axis=1)
    with pytest.raises(DegenerateFit) as exc:
        fit_latent_linear(rng.normal(size=(20, 1)), feats, ["x", "const"])
    assert exc.value.columns == ["intercept"]


def test_fit_intercept_only_design():
    latents = np.array([[1.0], [3.0]])
    fit = fit_latent_linear(latents, np.empty((2, 0)), [])
    assert fit.coefficients.shape == (1, 1)
    assert fit.coefficients[0, 0] == pytest.approx(2.0)


def test_fit_constant_latent_gets_unit_r_squared():
    feats = np.random.default_rng(0).normal(size=(25, 2))
    fit = fit_latent_linear(np.full((25, 1), 4.0), feats)
    assert fit.r_squared[0] == 1.0


def test_fit_sample_count_guard():
    with pytest.raises(ValueError):
        fit_latent_linear(np.zeros((2, 1)), np.zeros((2, 2)))


# --- relative errors ------------------------------------------------------------------


def test_relative_errors_zero_when_exact():
    vals = np.random.default_rng(0).normal(size=(4, 10, 3))
    r, skipped = relative_errors(vals, vals.copy(), 4, 3)
    assert r == 0.0 and skipped == 0


def test_relative_errors_single_term_value():
    # one index, one dim, two samples: ||(0,1)|| / ||(3,4)|| = 1/5
    vals = np.array([[[3.0], [4.0]]])
    preds = np.array([[[3.0], [3.0]]])
    r, skipped = relative_errors(vals, preds, 1, 1)
    assert r == pytest.approx(0.2)
    assert skipped == 0


def test_relative_errors_skips_zero_norm_terms():
    vals = np.zeros((2, 5, 2))
    preds = np.zeros((2, 5, 2))
    vals[0, :, 0] = 1.0  # only (0, 0) has a nonzero denominator
    preds[0, :, 0] = 1.0
    r, skipped = relative_errors(vals, preds, 2, 2)
    assert r == 0.0
    assert skipped == 3


def test_relative_errors_sample_permutation_invariant():
    rng = np.random.default_rng(1)
    vals = rng.normal(size=(3, 8, 2))
    preds = rng.normal(size=(3, 8, 2))
    perm = rng.permutation(8)
    r1, _ = relative_errors(vals, preds, 3, 2)
    r2, _ = relative_errors(vals[:, perm], preds[:, perm], 3, 2)
    assert r1 == pytest.approx(r2, rel=1e-12)


def test_relative_errors_all_zero_raises():
    z = np.zeros((1, 3, 1))
    with pytest.raises(AnalysisError):
        relative_errors(z, z, 1, 1)


def test_relative_errors_shape_guards():
    vals = np.zeros((2, 3, 2))
    with pytest.raises(ValueError):
        relative_errors(vals, np.zeros((2, 3, 1)), 2, 1)
    with pytest.raises(ValueError):
        relative_errors(vals, vals, 3, 2)


# --- truth features -------------------------------------------------------------------


def _newton_ds(samples=6, points=9, seed=0):
    return gen_newton(SystemSpec("newton", samples, np.linspace(0.0, 2.0, points), seed=seed))


def test_truth_features_newton_uses_governing_acceleration():
    ds = _newton_ds()
    idx = 4
    h, f, h_names, f_names = truth_features(ds, idx)
    assert h_names == ["r", "dr_dt"] and f_names == ["dr_dt", "d2r_dt2"]
    assert_allclose(h, ds.truth[:, idx, :])
    assert_allclose(f[:, 0], ds.truth[:, idx, 1])
    assert_allclose(f[:, 1], newton_rhs(ds.truth[:, idx, 0], ds.controls[:, 0]))


def test_truth_features_schrodinger_second_derivative_is_v_psi():
    spec = SystemSpec("schrodinger", 3, np.linspace(0.0, 5.0, 11), seed=1)
    ds = gen_schrodinger(spec)
    idx = 7
    h, f, _, f_names = truth_features(ds, idx)
    assert f_names == ["dpsi_dx", "d2psi_dx2"]
    v = potential_value(ds.controls.T, ds.meta["potential_offset"], ds.grid[idx])
    assert_allclose(f[:, 1], v * ds.truth[:, idx, 0])
    assert_allclose(h, ds.truth[:, idx, :])


def test_truth_features_pauli_splits_b_field():
    spec = SystemSpec("pauli", 2, np.linspace(0.0, 5.0, 11), seed=2)
    ds = gen_pauli(spec)
    idx = 5
    _, f, _, f_names = truth_features(ds, idx)
    v = potential_value(ds.controls.T, ds.meta["potential_offset"], ds.grid[idx])
    b = ds.meta["b_field"]
    assert f_names == ["dpsi1_dx", "d2psi1_dx2", "dpsi2_dx", "d2psi2_dx2"]
    assert_allclose(f[:, 1], (v + b) * ds.truth[:, idx, 0])
    assert_allclose(f[:, 3], (v - b) * ds.truth[:, idx, 2])


def test_truth_features_copernicus_probe_is_intercept_only():
    from conceptode.simulate import default_spec, generate

    ds = generate(default_spec("copernicus", scale="desk", seed=0, sample_count=4))
    h, f, h_names, f_names = truth_features(ds, 3)
    assert f.shape == (4, 0) and f_names == []
    assert h_names == ["phi_e", "phi_m"]
    assert_allclose(h, ds.truth[:, 3, :])


# --- metric pipeline on manufactured latents ------------------------------------------------


def test_latent_metrics_exact_linear_latents_scores_zero():
    ds = _newton_ds(samples=8, points=7)
    I, K = ds.grid.size, 8
    states = np.empty((I, K, 2))
    fvals = np.empty((I, K, 2))
    for i in range(I):
        r, rdot = ds.truth[:, i, 0], ds.truth[:, i, 1]
        rddot = newton_rhs(r, ds.controls[:, 0])
        states[i, :, 0] = 1.5 * r - 0.25 * rdot + 0.3
        states[i, :, 1] = -0.7 * r + 2.0 * rdot
        fvals[i, :, 0] = 0.9 * rdot + 0.1 * rddot
        fvals[i, :, 1] = 2.2 * rddot - 1.0
    out = latent_metrics(None, ds, n=2, states=states, fvals=fvals)
    assert out["r_h"] < 1e-9
    assert out["r_f"] < 1e-9
    assert out["m"] == I and out["n"] == 2
    assert len(out["per_index_h"]) == I
    # every K-vector here is nonzero, so nothing is skipped
    assert out["skipped_h"] == 0 and out["skipped_f"] == 0


def test_latent_metrics_reports_known_error():
    # predictions are min-norm fits, so corrupting the latents away from any
    # plane must push r_h strictly above zero
    ds = _newton_ds(samples=10, points=5)
    rng = np.random.default_rng(0)
    states = rng.normal(size=(5, 10, 2))
    fvals = np.ones((5, 10, 2))
    out = latent_metrics(None, ds, n=2, states=states, fvals=fvals)
    assert out["r_h"] > 0.1
    assert out["r_f"] < 1e-12  # constants are fit exactly by the intercept


# --- model-side probes -----------------------------------------------------------------


def _tiny_model(ds, latent=2, mode="first_order", seed=0):
    cfg = model_config_for(ds, latent_dim=latent, mode=mode)
    cfg = type(cfg)(**{**cfg.to_dict(), "coder_hidden": (8,), "field_hidden": (6,)})
    return init_model(cfg, seed=seed)


def test_model_trajectories_shapes_and_field_consistency():
    ds = _newton_ds(samples=4, points=6)
    model = _tiny_model(ds)
    states, fvals = model_trajectories(model, ds)
    assert states.shape == (6, 4, 2) and fvals.shape == (6, 4, 2)
    # the field values must be the field evaluated at the stored states
    from conceptode.model import control_payload, make_field

    field = make_field(model)
    assert_allclose(fvals[3], field(ds.grid[3], states[3], control_payload(ds)))


def test_probe_governing_zero_field_gives_zero_coefficients():
    ds = _newton_ds(samples=12, points=6)
    model = _tiny_model(ds)
    flat = model.flat.copy()
    from conceptode.model import group_slices, model_from_flat

    flat[group_slices(model.config)["field"]] = 0.0

    frozen = model_from_flat(model.config, flat)
    probes = probe_governing(frozen, ds, [3])
    fit = probes[3]
    assert_allclose(fit.coefficients, 0.0, atol=1e-12)


def test_probe_governing_rejects_degenerate_index():
    # at the first grid index every sample has dr/dt = 0: strict fits refuse
    ds = _newton_ds(samples=8, points=6)
    model = _tiny_model(ds)
    with pytest.raises(DegenerateFit):
        probe_governing(model, ds, [0])


# --- ablation scan ---------------------------------------------------------------------


def _fast_cfg(epochs=6, seed=0):
    return TrainConfig(beta=0.0, mre_weight=1.0, batch_size=8, epochs=epochs,
                       lr_start=0.01, lr_end=0.005, seed=seed)


@pytest.mark.slow
def test_run_ablation_scans_and_selects():
    ds = _newton_ds(samples=12, points=6)
    cfg = _fast_cfg()
    seen = []
    curve = run_ablation(ds, [2, 1], restarts=2, cfg=cfg,
                         on_cell=lambda d, r, v: seen.append((d, r, v)))
    assert curve.dims == [1, 2]
    assert [s[:2] for s in seen] == [(1, 0), (1, 1), (2, 0), (2, 1)]
    assert all(v is not None and np.isfinite(v) for _, _, v in seen)
    assert len(curve.cell_losses[1]) == 2 and len(curve.cell_losses[2]) == 2
    assert curve.chosen_dim in (1, 2)
    assert curve.failures == []
    assert curve.chosen_dim == select_latent_dim(curve)


@pytest.mark.slow
def test_run_ablation_deterministic():
    ds = _newton_ds(samples=10, points=5)
    cfg = _fast_cfg(epochs=4, seed=3)
    c1 = run_ablation(ds, [1, 2], restarts=1, cfg=cfg)
    c2 = run_ablation(ds, [1, 2], restarts=1, cfg=cfg)
    assert c1.mean_losses == c2.mean_losses
    assert c1.cell_losses == c2.cell_losses


def test_run_ablation_records_failures_and_requires_survivors(monkeypatch):
    ds = _newton_ds(samples=6, points=5)

    def explode(model, data, cfg, on_epoch=None):
        raise TrainingDiverged("boom", epoch=1)

    monkeypatch.setattr("conceptode.analyze.fit", explode)
    with pytest.raises(AnalysisError, match="latent dim 1"):
        run_ablation(ds, [1], restarts=2, cfg=_fast_cfg(epochs=2))


def test_run_ablation_partial_failures_are_tolerated(monkeypatch):
    ds = _newton_ds(samples=6, points=5)
    calls = {"n": 0}
    import conceptode.analyze as analyze_mod

    real_fit = analyze_mod.fit

    def flaky(model, data, cfg, on_epoch=None):
        calls["n"] += 1
        if calls["n"] == 1:
            raise TrainingDiverged("boom", epoch=0)
        return real_fit(model, data, cfg, on_epoch=on_epoch)

    monkeypatch.setattr("conceptode.analyze.fit", flaky)
    curve = run_ablation(ds, [1], restarts=2, cfg=_fast_cfg(epochs=2))
    assert len(curve.failures) == 1
    assert curve.failures[0][:2] == (1, 0)
    assert len(curve.cell_losses[1]) == 1


def test_run_ablation_validates_arguments():
    ds = _newton_ds(samples=4, points=5)
    with pytest.raises(ValueError):
        run_ablation(ds, [], restarts=1, cfg=_fast_cfg())
    with pytest.raises(ValueError):
        run_ablation(ds, [1], restarts=0, cfg=_fast_cfg())


# --- independence report -----------------------------------------------------------------


def test_independence_report_structure_on_untrained_model():
    ds = _newton_ds(samples=6, points=6)
    model = _tiny_model(ds, latent=2, mode="second_order")
    rep = independence_report(model, ds)
    assert set(rep["feature_names"]) <= {"dr_dt", "d2r_dt2"}
    assert len(rep["outputs"]) == 1
    out = rep["outputs"][0]
    assert out["primary"] == "d2r_dt2" or np.isnan(out["ratio"])
    assert "r2_primary_only" in out or out["primary"] is None


def test_independence_report_first_order_rejected():
    ds = _newton_ds(samples=4, points=5)
    model = _tiny_model(ds, latent=2, mode="first_order")
    with pytest.raises(ValueError):
        independence_report(model, ds)


def test_independence_manufactured_clean_coupling():
    # acceleration output exactly proportional to d2r/dt2 -> tiny ratio, r2 ~ 1
    ds = _newton_ds(samples=20, points=8)
    model = _tiny_model(ds, latent=2, mode="second_order")
    I, K = ds.grid.size, 20
    states = np.zeros((I, K, 2))
    fvals = np.zeros((I, K, 2))
    for i in range(I):
        rddot = newton_rhs(ds.truth[:, i, 0], ds.controls[:, 0])
        fvals[i, :, 1] = 3.0 * rddot
    rep = independence_report(model, ds, states=states, fvals=fvals)
    out = rep["outputs"][0]
    assert out["primary"] == "d2r_dt2"
    assert out["ratio"] < 1e-8
    assert out["r2_primary_only"] > 1 - 1e-10


# --- report assembly ---------------------------------------------------------------------


@pytest.mark.slow
def test_build_and_write_report(tmp_path):
    ds = _newton_ds(samples=8, points=10)
    model = _tiny_model(ds)
    curve = _curve([1, 2], [1.0, 0.4])
    curve.chosen_dim = 2
    report = build_report(model, ds, probe_indices=[2, 5], ablation=curve)
    assert report.system == "newton"
    assert report.probe_indices == [2, 5]
    assert set(report.latent_r2) == {2, 5}
    assert report.metrics["m"] == 10

    out = tmp_path / "report"
    write_report(out, report, model=model, ds=ds)
    data = json.loads((out / "report.json").read_text())
    assert data["system"] == "newton"
    assert data["ablation"]["chosen_dim"] == 2
    per_index = (out / "per_index.csv").read_text().strip().splitlines()
    assert len(per_index) == 1 + 10
    plane = (out / "plane_2.csv").read_text().strip().splitlines()
    assert len(plane) == 1 + 8
    assert plane[0].split(",")[:2] == ["r", "dr_dt"]
    assert (out / "loss_vs_dim.csv").exists()
    assert (out / "field_5.csv").exists()


@pytest.mark.slow
def test_run_ablation_worker_pool_matches_sequential():
    ds = _newton_ds(samples=8, points=5)
    cfg = _fast_cfg(epochs=3, seed=5)
    seq = run_ablation(ds, [1, 2], restarts=1, cfg=cfg, workers=1)
    par = run_ablation(ds, [1, 2], restarts=1, cfg=cfg, workers=2)
    assert seq.cell_losses == par.cell_losses
    assert seq.chosen_dim == par.chosen_dim


def test_run_ablation_rejects_bad_worker_count():
    ds = _newton_ds(samples=4, points=5)
    with pytest.raises(ValueError):
        run_ablation(ds, [1], restarts=1, cfg=_fast_cfg(), workers=0)
