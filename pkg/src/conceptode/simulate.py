"""Reference simulators for the four physical systems.

Each generator is a pure function of its SystemSpec (including the seed) and
produces a columnar Dataset: observations the model trains on, per-sample
controls, and ground-truth concept trajectories that are kept analysis-only.

Systems
-------
copernicus   uniform circular Earth/Mars motion; observations are geocentric
             angles of the Sun and Mars over 50-week windows of one long
             weekly history.
newton       radial two-body fall, d2r/dt2 = (1/r^2)(r0^2/r - 1), started
             from (r0, 0); r0 is both the control and the encoder input.
schrodinger  stationary wave equation psi'' = V(x) psi under random sinusoidal
             potentials; the observation is the density rho = psi^2.
pauli        two decoupled spinor components psi1'' = (V+B) psi1 and
             psi2'' = (V-B) psi2 with B = 1; observation rho = psi1^2 + psi2^2.

Potentials follow the nine-term sine recipe V(x) = sum_k c_k sin(k x) + offset
with rejection sampling against a per-system admissibility band, audited on a
grid denser than the observation grid.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import __version__
from ._container import load_blocks, save_blocks
from .odeint import FuncField, SolverConfig, integrate

__all__ = [
    "SystemSpec",
    "Sample",
    "Dataset",
    "PotentialCoeffs",
    "SYSTEMS",
    "default_spec",
    "geocentric_from_heliocentric",
    "gen_copernicus",
    "gen_newton",
    "newton_rhs",
    "newton_trajectory",
    "potential_value",
    "sample_potential",
    "schrodinger_trajectory",
    "pauli_trajectory",
    "gen_schrodinger",
    "gen_pauli",
    "generate",
    "save_dataset",
    "load_dataset",
    "DegenerateGeometry",
    "SamplingExhausted",
]

SYSTEMS = ("copernicus", "newton", "schrodinger", "pauli")

# heliocentric constants: AU radii, sidereal periods in weeks
R_EARTH = 1.0
R_MARS = 1.524
OMEGA_EARTH = 2.0 * np.pi / 52.14  # rad / week
OMEGA_MARS = 2.0 * np.pi / 98.14
HISTORY_WEEKS = 3665

B_FIELD = 1.0  # uniform magnetic field for the pauli system

N_POTENTIAL_TERMS = 9
AUDIT_POINTS = 200

# per-system potential recipe: (band, offset, proposal scale)
_POTENTIAL_RECIPE = {
    "schrodinger": ((-3.0, 0.0), -1.0, 1.0),
    # the band [-2, -1.5] cannot contain V(0) = offset + 0, so the offset sits
    # at the band midpoint and the proposal is shrunk to make acceptance viable
    "pauli": ((-2.0, -1.5), -1.75, 0.1),
}

_GEN_TOL = 1e-10  # solver tolerance for ground-truth integration


class DegenerateGeometry(RuntimeError):
    """Earth and Mars coincide: geocentric angles undefined."""


class SamplingExhausted(RuntimeError):
    """Rejection sampling hit its proposal cap without an accepted draw."""


@dataclass
class SystemSpec:
    """What to simulate: system tag, observation grid, corpus size, seed."""

    system: str
    sample_count: int
    grid: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValueError(f"unknown system {self.system!r}")
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")
        d = np.diff(self.grid)
        if self.grid.ndim != 1 or self.grid.size < 2 or not np.all(d > 0):
            raise ValueError("grid must be 1-D, increasing, with >= 2 points")
        if not np.allclose(d, d[0], rtol=1e-9, atol=0.0):
            raise ValueError("grid must be uniform")


_FULL_COUNTS = {"copernicus": 2000, "newton": 1000, "schrodinger": 2000, "pauli": 4000}
_DEFAULT_GRIDS = {
    "copernicus": lambda: np.arange(50, dtype=np.float64),
    "newton": lambda: np.linspace(0.0, 10.0, 100),
    "schrodinger": lambda: np.linspace(0.0, 5.0, 50),
    "pauli": lambda: np.linspace(0.0, 5.0, 100),
}


def default_spec(system: str, scale: str = "full", seed: int = 0, sample_count=None) -> SystemSpec:
    """Standard corpus spec for a system; desk scale divides the corpus by 10."""
    if scale not in ("full", "desk"):
        raise ValueError(f"unknown scale {scale!r}")
    count = _FULL_COUNTS[system]
    if scale == "desk":
        count //= 10
    if sample_count is not None:
        count = int(sample_count)
    return SystemSpec(system=system, sample_count=count, grid=_DEFAULT_GRIDS[system](), seed=seed)


@dataclass
class Sample:
    """One trajectory: observations, optional control, analysis-only truth."""

    observations: np.ndarray  # (I, J)
    control: np.ndarray | None
    truth: np.ndarray  # (I, T)


@dataclass
class Dataset:
    """Columnar corpus of trajectories produced by one generator run."""

    system: str
    grid: np.ndarray  # (I,)
    observations: np.ndarray  # (K, I, J)
    controls: np.ndarray | None  # (K, C) or None
    truth: np.ndarray  # (K, I, T)
    meta: dict = dc_field(default_factory=dict)

    @property
    def sample_count(self) -> int:
        return self.observations.shape[0]

    def sample(self, k: int) -> Sample:
        ctrl = None if self.controls is None else self.controls[k]
        return Sample(self.observations[k], ctrl, self.truth[k])

    def subset(self, idx) -> "Dataset":
        """View-like dataset restricted to the given sample indices."""
        return Dataset(
            system=self.system,
            grid=self.grid,
            observations=self.observations[idx],
            controls=None if self.controls is None else self.controls[idx],
            truth=self.truth[idx],
            meta=self.meta,
        )


def _derived_seed(seed: int, *key: int) -> np.random.Generator:
    """Independent per-sample RNG stream; stable regardless of draw order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in key]]))


def _wrap_angle(a):
    """Map angles to (-pi, pi]."""
    w = np.remainder(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


# --- copernicus --------------------------------------------------------------


def geocentric_from_heliocentric(phi_e, phi_m, R_e=R_EARTH, R_m=R_MARS):
    """Geocentric Sun/Mars angles from heliocentric ones.

    Returns (theta_s, theta_m, d). theta_s = pi - phi_e; theta_m is the planar
    bearing of Mars as seen from Earth (atan2 of the Cartesian separation);
    d is the Earth-Mars distance. All angles wrapped to (-pi, pi].
    """
    if R_e <= 0 or R_m <= 0:
        raise ValueError("radii must be positive")
    phi_e = np.asarray(phi_e, dtype=np.float64)
    phi_m = np.asarray(phi_m, dtype=np.float64)
    d = np.sqrt(R_m**2 + R_e**2 - 2.0 * R_m * R_e * np.cos(phi_m - phi_e))
    if np.any(d < 1e-12):
        raise DegenerateGeometry("Earth and Mars coincide; bearing undefined")
    theta_s = _wrap_angle(np.pi - phi_e)
    theta_m = _wrap_angle(
        np.arctan2(R_m * np.sin(phi_m) - R_e * np.sin(phi_e),
                   R_m * np.cos(phi_m) - R_e * np.cos(phi_e))
    )
    return theta_s, theta_m, d


def gen_copernicus(spec: SystemSpec) -> Dataset:
    """Random windows of geocentric angles cut from one long weekly history."""
    if spec.system != "copernicus":
        raise ValueError("spec.system must be 'copernicus'")
    I = spec.grid.size
    rng_phase = _derived_seed(spec.seed, 0)
    rng_windows = _derived_seed(spec.seed, 1)
    phi_e0, phi_m0 = rng_phase.uniform(0.0, 2.0 * np.pi, size=2)

    weeks = np.arange(HISTORY_WEEKS, dtype=np.float64)
    phi_e = phi_e0 + OMEGA_EARTH * weeks
    phi_m = phi_m0 + OMEGA_MARS * weeks
    theta_s, theta_m, _ = geocentric_from_heliocentric(phi_e, phi_m)

    starts = rng_windows.integers(0, HISTORY_WEEKS - I + 1, size=spec.sample_count)
    win = starts[:, None] + np.arange(I)[None, :]
    observations = np.stack([theta_s[win], theta_m[win]], axis=-1)  # (K, I, 2)
    # Truth phases wrap once at the window start and then accumulate
    # continuously, so a batch of windows stays a translated copy of the grid
    # of starting phases instead of picking up a 2*pi seam at some index.
    steps = np.arange(I, dtype=np.float64)[None, :]
    truth = np.stack(
        [
            np.remainder(phi_e[starts], 2.0 * np.pi)[:, None] + OMEGA_EARTH * steps,
            np.remainder(phi_m[starts], 2.0 * np.pi)[:, None] + OMEGA_MARS * steps,
        ],
        axis=-1,
    )
    meta = _base_meta(spec)
    meta.update(
        control_kind="none",
        input_mode="first_moment",
        truth_names=["phi_e", "phi_m"],
        radii=[R_EARTH, R_MARS],
        weekly_rates=[OMEGA_EARTH, OMEGA_MARS],
        history_weeks=HISTORY_WEEKS,
        initial_phases=[float(phi_e0), float(phi_m0)],
        window_starts=[int(s) for s in starts],
    )
    return Dataset("copernicus", spec.grid, observations, None, truth, meta)


# --- newton ------------------------------------------------------------------


def newton_rhs(r, r0):
    """Radial acceleration (1/r^2)(r0^2/r - 1), with GM = 1 and the angular
    momentum fixed by the circular orbit at radius r0."""
    r = np.asarray(r, dtype=np.float64)
    return (1.0 / r**2) * (np.asarray(r0, dtype=np.float64) ** 2 / r - 1.0)


def _newton_field(r0):
    def rhs(t, s):
        out = np.empty_like(s)
        out[..., 0] = s[..., 1]
        out[..., 1] = newton_rhs(s[..., 0], r0)
        return out

    return FuncField(rhs)


def newton_trajectory(r0: float, grid, tol: float = _GEN_TOL) -> np.ndarray:
    """(r, dr/dt) over the grid from initial state (r0, 0)."""
    cfg = SolverConfig(dense_grid=grid, rel_tol=tol, abs_tol=tol, max_steps=1_000_000)
    return integrate(_newton_field(float(r0)), np.array([float(r0), 0.0]), cfg)


def gen_newton(spec: SystemSpec) -> Dataset:
    if spec.system != "newton":
        raise ValueError("spec.system must be 'newton'")
    rng = _derived_seed(spec.seed, 0)
    r0 = rng.uniform(1.0, 3.0, size=spec.sample_count)
    cfg = SolverConfig(dense_grid=spec.grid, rel_tol=_GEN_TOL, abs_tol=_GEN_TOL, max_steps=1_000_000)
    init = np.stack([r0, np.zeros_like(r0)], axis=1)  # (K, 2)
    states = integrate(_newton_field(r0), init, cfg)  # (I, K, 2)
    truth = states.transpose(1, 0, 2)  # (K, I, 2) = (r, dr/dt)
    observations = truth[:, :, :1].copy()
    meta = _base_meta(spec)
    meta.update(
        control_kind="constant",
        control_names=["r0"],
        input_mode="first_moment",
        truth_names=["r", "dr_dt"],
    )
    return Dataset("newton", spec.grid, observations, r0[:, None].copy(), truth, meta)


# --- random potentials -------------------------------------------------------


@dataclass
class PotentialCoeffs:
    """V(x) = sum_k c_k sin(k x) + offset, k = 1..9."""

    c: np.ndarray
    offset: float = -1.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.c.shape != (N_POTENTIAL_TERMS,):
            raise ValueError(f"need {N_POTENTIAL_TERMS} coefficients")

    def __call__(self, x):
        return potential_value(self.c, self.offset, x)


def potential_value(c, offset, x):
    """Evaluate the sinusoidal potential at positions x (scalar or array)."""
    x = np.asarray(x, dtype=np.float64)
    k = np.arange(1, N_POTENTIAL_TERMS + 1, dtype=np.float64)
    return np.sin(np.multiply.outer(x, k)) @ np.asarray(c, dtype=np.float64) + offset


def _audit_grid(grid):
    return np.linspace(grid[0], grid[-1], AUDIT_POINTS)


def _sample_potential_counted(rng, band, offset, scale, audit, cap, chunk=2048):
    """Rejection-sample one admissible coefficient vector; count proposals."""
    low, high = band
    k = np.arange(1, N_POTENTIAL_TERMS + 1, dtype=np.float64)
    # coarse pre-screen on a subsampled grid, full audit only on survivors
    coarse = audit[::4]
    S_coarse = np.sin(np.outer(k, coarse))
    S_full = np.sin(np.outer(k, audit))
    used = 0
    while used < cap:
        n = min(chunk, cap - used)
        c = rng.normal(size=(n, N_POTENTIAL_TERMS)) * scale
        used += n
        v = c @ S_coarse + offset
        ok = np.nonzero(np.all((v > low) & (v < high), axis=1))[0]
        for i in ok:
            vf = c[i] @ S_full + offset
            if np.all((vf > low) & (vf < high)):
                # proposals after the accepted one are discarded; recompute the
                # exact count so the tally is order-independent
                return PotentialCoeffs(c[i].copy(), offset), used - n + int(i) + 1
    raise SamplingExhausted(
        f"no admissible potential in {cap} proposals for band {band} "
        f"(offset {offset}, scale {scale})"
    )


def sample_potential(seed: int, band, offset=-1.0, scale=1.0, grid=None, cap=2_000_000) -> PotentialCoeffs:
    """Draw one potential whose values stay strictly inside ``band``.

    The admissibility check runs on a dense audit grid spanning ``grid``
    (default: the Schrödinger observation window [0, 5]).
    """
    if grid is None:
        grid = _DEFAULT_GRIDS["schrodinger"]()
    audit = _audit_grid(np.asarray(grid, dtype=np.float64))
    rng = np.random.default_rng(seed)
    coeffs, _ = _sample_potential_counted(rng, band, offset, scale, audit, cap)
    return coeffs


def _sample_potential_batch(spec, band, offset, scale, cap):
    audit = _audit_grid(spec.grid)
    cs = np.empty((spec.sample_count, N_POTENTIAL_TERMS))
    proposals = 0
    for ksamp in range(spec.sample_count):
        rng = _derived_seed(spec.seed, ksamp)
        coeffs, n = _sample_potential_counted(rng, band, offset, scale, audit, cap)
        cs[ksamp] = coeffs.c
        proposals += n
    return cs, proposals


# --- wave systems ------------------------------------------------------------


def _wave_field(cs, offset, n_components, B=0.0):
    """Batched first-order form of the decoupled second-order wave equations.

    State layout per sample: (psi_1, psi_1', [psi_2, psi_2']). The potential is
    evaluated analytically at the solver's internal positions.
    """
    cs = np.atleast_2d(np.asarray(cs, dtype=np.float64))
    k = np.arange(1, N_POTENTIAL_TERMS + 1, dtype=np.float64)

    def rhs(x, s):
        v = cs @ np.sin(k * x) + offset  # (K,)
        out = np.empty_like(s)
        out[..., 0] = s[..., 1]
        out[..., 1] = (v + B) * s[..., 0]
        if n_components == 2:
            out[..., 2] = s[..., 3]
            out[..., 3] = (v - B) * s[..., 2]
        return out

    return FuncField(rhs)


def schrodinger_trajectory(coeffs: PotentialCoeffs, grid, init=(1.0, 1.0), tol=_GEN_TOL):
    """(psi, dpsi/dx) over the grid for one potential."""
    cfg = SolverConfig(dense_grid=grid, rel_tol=tol, abs_tol=tol, max_steps=1_000_000)
    field = _wave_field(coeffs.c[None, :], coeffs.offset, 1)
    states = integrate(field, np.array([list(init)], dtype=np.float64), cfg)
    return states[:, 0, :]  # (I, 2)


def pauli_trajectory(coeffs: PotentialCoeffs, grid, B=B_FIELD, init=(1.0, 1.0, 1.0, 1.0), tol=_GEN_TOL):
    """(psi1, psi1', psi2, psi2') over the grid for one potential."""
    cfg = SolverConfig(dense_grid=grid, rel_tol=tol, abs_tol=tol, max_steps=1_000_000)
    field = _wave_field(coeffs.c[None, :], coeffs.offset, 2, B=B)
    states = integrate(field, np.array([list(init)], dtype=np.float64), cfg)
    return states[:, 0, :]  # (I, 4)


def gen_schrodinger(spec: SystemSpec) -> Dataset:
    if spec.system != "schrodinger":
        raise ValueError("spec.system must be 'schrodinger'")
    band, offset, scale = _POTENTIAL_RECIPE["schrodinger"]
    cs, proposals = _sample_potential_batch(spec, band, offset, scale, cap=2_000_000)

    cfg = SolverConfig(dense_grid=spec.grid, rel_tol=_GEN_TOL, abs_tol=_GEN_TOL, max_steps=1_000_000)
    init = np.ones((spec.sample_count, 2))
    states = integrate(_wave_field(cs, offset, 1), init, cfg)  # (I, K, 2)
    truth = states.transpose(1, 0, 2)  # (K, I, 2)
    observations = (truth[:, :, :1] ** 2).copy()  # rho = psi^2
    meta = _base_meta(spec)
    meta.update(
        control_kind="potential",
        control_names=[f"c{i}" for i in range(1, N_POTENTIAL_TERMS + 1)],
        input_mode="trajectory",
        truth_names=["psi", "dpsi_dx"],
        potential_offset=offset,
        proposal_scale=scale,
        band=list(band),
        audit_points=AUDIT_POINTS,
        proposals=proposals,
        accept_rate=spec.sample_count / proposals,
    )
    return Dataset("schrodinger", spec.grid, observations, cs, truth, meta)


def gen_pauli(spec: SystemSpec) -> Dataset:
    if spec.system != "pauli":
        raise ValueError("spec.system must be 'pauli'")
    band, offset, scale = _POTENTIAL_RECIPE["pauli"]
    cs, proposals = _sample_potential_batch(spec, band, offset, scale, cap=2_000_000)

    cfg = SolverConfig(dense_grid=spec.grid, rel_tol=_GEN_TOL, abs_tol=_GEN_TOL, max_steps=1_000_000)
    init = np.ones((spec.sample_count, 4))
    states = integrate(_wave_field(cs, offset, 2, B=B_FIELD), init, cfg)  # (I, K, 4)
    truth = states.transpose(1, 0, 2)  # (K, I, 4)
    rho = truth[:, :, 0] ** 2 + truth[:, :, 2] ** 2
    observations = rho[:, :, None].copy()
    meta = _base_meta(spec)
    meta.update(
        control_kind="potential",
        control_names=[f"c{i}" for i in range(1, N_POTENTIAL_TERMS + 1)],
        input_mode="trajectory",
        truth_names=["psi1", "dpsi1_dx", "psi2", "dpsi2_dx"],
        potential_offset=offset,
        proposal_scale=scale,
        band=list(band),
        audit_points=AUDIT_POINTS,
        proposals=proposals,
        accept_rate=spec.sample_count / proposals,
        b_field=B_FIELD,
    )
    return Dataset("pauli", spec.grid, observations, cs, truth, meta)


_GENERATORS = {
    "copernicus": gen_copernicus,
    "newton": gen_newton,
    "schrodinger": gen_schrodinger,
    "pauli": gen_pauli,
}


def generate(spec: SystemSpec) -> Dataset:
    """Dispatch to the system's generator."""
    return _GENERATORS[spec.system](spec)


def _base_meta(spec: SystemSpec) -> dict:
    return {
        "system": spec.system,
        "seed": spec.seed,
        "sample_count": spec.sample_count,
        "generator_version": __version__,
    }


# --- dataset persistence -----------------------------------------------------


def save_dataset(path, ds: Dataset) -> None:
    """Write a dataset; a ``.bin`` suffix selects the binary layout, anything
    else becomes a directory of CSV blocks plus a JSON manifest. Both layouts
    round-trip exactly."""
    path = Path(path)
    if path.suffix == ".bin":
        arrays = {"grid": ds.grid, "observations": ds.observations, "truth": ds.truth}
        if ds.controls is not None:
            arrays["controls"] = ds.controls
        save_blocks(path, {"kind": "dataset", **ds.meta}, arrays)
        return

    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "dataset",
        **ds.meta,
        "grid": [float(g) for g in ds.grid],
        "shapes": {
            "observations": list(ds.observations.shape),
            "truth": list(ds.truth.shape),
            "controls": None if ds.controls is None else list(ds.controls.shape),
        },
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    _write_csv_block(path / "observations.csv", ds.observations)
    _write_csv_block(path / "truth.csv", ds.truth)
    if ds.controls is not None:
        _write_csv_block(path / "controls.csv", ds.controls)


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        manifest = json.loads((path / "manifest.json").read_text())
        shapes = manifest.pop("shapes")
        grid = np.array(manifest.pop("grid"), dtype=np.float64)
        manifest.pop("kind", None)
        obs = _read_csv_block(path / "observations.csv", shapes["observations"])
        truth = _read_csv_block(path / "truth.csv", shapes["truth"])
        controls = None
        if shapes["controls"] is not None:
            controls = _read_csv_block(path / "controls.csv", shapes["controls"])
        return Dataset(manifest["system"], grid, obs, controls, truth, manifest)

    manifest, arrays = load_blocks(path)
    if manifest.pop("kind", None) != "dataset":
        raise ValueError(f"{path}: not a dataset file")
    return Dataset(
        system=manifest["system"],
        grid=arrays["grid"],
        observations=arrays["observations"],
        controls=arrays.get("controls"),
        truth=arrays["truth"],
        meta=manifest,
    )


def _write_csv_block(path, arr):
    """Rows = samples, columns = flattened remaining axes; %.17g round-trips."""
    flat = arr.reshape(arr.shape[0], -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"v{i}" for i in range(flat.shape[1])])
        for row in flat:
            writer.writerow([f"{v:.17g}" for v in row])


def _read_csv_block(path, shape):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)  # header
        rows = [[float(v) for v in row] for row in reader]
    return np.array(rows, dtype=np.float64).reshape(shape)
