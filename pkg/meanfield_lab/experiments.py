"""
Experiment recipes.

Each recipe takes a validated config and an artifact store, runs the solvers
and returns the summary written next to the snapshots. Sweeps and replica
fan-outs go through the process pool with order-preserving assembly.
"""

import logging
import math
from dataclasses import replace
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid

from meanfield_lab.config import Experiment, ExperimentConfig, REQUIRED_SECTIONS
from meanfield_lab.errors import ConfigError, LabError, NumericalError, annotate
from meanfield_lab.hydro import (
    HydroState, monokinetic_init, run_hydro, run_keller_segel, solve_chemical_potential,
    step_keller_segel,
)
from meanfield_lab.kinetic import PhaseDensity, moments, run_vlasov
from meanfield_lab.laws import InitialLaw
from meanfield_lab.model import (
    ModelKind, ModelSpec, ParticleEnsemble, total_energy, velocity_diameter,
)
from meanfield_lab.particles import run_replicas
from meanfield_lab.storage import ArtifactStore
from meanfield_lab.transport import chaos_error, fit_rate, subtract_noise_floor
from meanfield_lab.utils import ResultCache, hash_text, parallel_map, resolve_workers

logger = logging.getLogger(__name__)

COMPARISON_POINTS = 11

# Vlasov reference solutions shared across the N-loop of a rate study; a
# study needs two (t and 0), the bound covers a few configs per process
REFERENCE_CACHE_TTL = 3600.0
REFERENCE_CACHE_ENTRIES = 8
reference_cache = ResultCache(ttl_seconds=REFERENCE_CACHE_TTL, max_entries=REFERENCE_CACHE_ENTRIES)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def snapshot_times(cfg: ExperimentConfig, t_final: float) -> List[float]:
    times = sorted(set(cfg.output.snapshot_times))
    beyond = [t for t in times if t > t_final + 1e-12]
    if beyond:
        raise ConfigError(f"snapshot time(s) {beyond} beyond t_final_time={t_final}", "output")
    return times


def _require_1d(model: ModelSpec, cfg: ExperimentConfig, what: str) -> None:
    if cfg.section("model").dim != 1:
        raise ConfigError(f"{what} runs on the 1-d phase-space grid; set dim = 1", "model")


def initial_phase_density(cfg: ExperimentConfig, model: ModelSpec) -> PhaseDensity:
    g = cfg.section("grid")
    return PhaseDensity.from_law(cfg.build_law(), g.n_x, g.n_v, (g.x_min_length, g.x_max_length),
                                 (g.v_min_speed, g.v_max_speed),
                                 with_chem=model.kind == ModelKind.CHEMOTAXIS)


def solve_vlasov(cfg: ExperimentConfig, model: ModelSpec, times: Sequence[float],
                 t_final: Optional[float] = None) -> List[Tuple[float, PhaseDensity]]:
    """Kinetic run from the configured law; returns the requested snapshots."""
    g = cfg.section("grid")
    t_final = g.t_final_time if t_final is None else t_final
    rho0 = initial_phase_density(cfg, model)
    logger.info(f"Vlasov run on {g.n_x}x{g.n_v} cells to t={t_final}")
    _, snapshots = run_vlasov(rho0, model, g.dt_time, t_final, times, g.include_decay)
    return snapshots


def velocity_profile(cfg: ExperimentConfig, law: InitialLaw, x: np.ndarray) -> np.ndarray:
    h = cfg.section("hydro")
    if h.velocity_profile == "law":
        return law.mean_velocity(x)
    if h.velocity_profile == "zero":
        return np.zeros_like(x)
    if h.velocity_profile == "constant":
        return np.full_like(x, h.velocity_amplitude_speed)
    length = h.x_max_length - h.x_min_length
    return h.velocity_amplitude_speed * np.sin(2.0 * np.pi * (x - h.x_min_length) / length)


def initial_hydro_state(cfg: ExperimentConfig, model: ModelSpec,
                        eps_p: Optional[float] = None) -> HydroState:
    h = cfg.section("hydro")
    law = cfg.build_law()
    return HydroState.from_functions(
        law.position_density, lambda x: velocity_profile(cfg, law, x), h.n_x,
        (h.x_min_length, h.x_max_length), with_psi=model.kind == ModelKind.CHEMOTAXIS,
        eps=h.eps_scaling, eps_p=h.eps_p_pressure if eps_p is None else eps_p)


def l1_distance(a: np.ndarray, b: np.ndarray, dx: float) -> float:
    return float(np.sum(np.abs(a - b)) * dx)


# ---------------------------------------------------------------------------
# Single-solver recipes
# ---------------------------------------------------------------------------


def run_particles(cfg: ExperimentConfig, store: ArtifactStore, workers: int) -> Dict:
    """Replica ensemble with per-snapshot diagnostics."""
    model = cfg.build_model()
    icfg = cfg.build_integrator()
    plan = cfg.build_replica_plan()
    times = snapshot_times(cfg, icfg.t_final)
    keep_fields = cfg.output.write_fields and model.kind == ModelKind.CHEMOTAXIS and plan.dim == 1
    snaps = run_replicas(plan, model, icfg, times, workers, keep_fields)
    mass = math.inf if model.kind == ModelKind.MULTI_AGENT else plan.mass
    rows = []
    for k, t in enumerate(snaps.times):
        store.particles(k, t, snaps.positions[k], snaps.velocities[k])
        energies, diameters, momenta = [], [], []
        for x, v in snaps.states(k):
            ens = ParticleEnsemble(x, v, np.full(plan.n_particles, mass))
            energies.append(total_energy(model, ens))
            diameters.append(velocity_diameter(v))
            momenta.append(v.sum(axis=0))
        rows.append({"t": t, "mean_energy": float(np.mean(energies)),
                     "mean_velocity_diameter": float(np.mean(diameters)),
                     "mean_momentum": np.mean(momenta, axis=0).tolist()})
        if keep_fields and snaps.chem:
            field = snaps.chem[k][0]
            store.fields("chemical", k, t, field.axes()[0], {"phi": field.values})
    return {"model": model.describe(), "replicas": plan.replicas,
            "n_particles": plan.n_particles, "snapshots": rows}


def run_vlasov_experiment(cfg: ExperimentConfig, store: ArtifactStore, workers: int) -> Dict:
    model = cfg.build_model()
    _require_1d(model, cfg, "vlasov")
    g = cfg.section("grid")
    times = snapshot_times(cfg, g.t_final_time)
    rows = []
    for k, (t, rho) in enumerate(solve_vlasov(cfg, model, times)):
        fields = moments(rho)
        if cfg.output.write_fields:
            store.phase(k, t, rho.x, rho.v, rho.values)
        columns = {"mu": fields.density, "q": fields.momentum, "u": fields.velocity}
        if rho.chem is not None:
            columns["psi"] = rho.chem.values
        store.fields("moments", k, t, rho.x, columns)
        rows.append({"t": t, "mass": rho.mass,
                     "momentum": float(fields.momentum.sum() * rho.dx)})
    return {"model": model.describe(), "grid": {"n_x": g.n_x, "n_v": g.n_v}, "snapshots": rows}


def run_euler(cfg: ExperimentConfig, store: ArtifactStore, workers: int) -> Dict:
    model = cfg.build_model()
    h = cfg.section("hydro")
    times = snapshot_times(cfg, h.t_final_time)
    state = initial_hydro_state(cfg, model)
    _, snapshots = run_hydro(state, model, h.dt_time, h.t_final_time, times, h.scaled,
                             h.chem_scheme)
    rows = []
    for k, (t, s) in enumerate(snapshots):
        psi = s.psi if s.psi is not None else np.zeros(s.n)
        store.fields("hydro", k, t, s.x, {"mu": s.mu, "u": s.u, "psi": psi})
        rows.append({"t": t, "mass": s.mass, "momentum": s.total_momentum})
    return {"model": model.describe(), "eps": h.eps_scaling, "eps_p": h.eps_p_pressure,
            "snapshots": rows}


def _keller_segel_grid(cfg: ExperimentConfig):
    k = cfg.section("keller_segel")
    length = k.x_max_length - k.x_min_length
    dx = length / k.n_x
    x = k.x_min_length + (np.arange(k.n_x) + 0.5) * dx
    mu = np.asarray(cfg.build_law().position_density(x), dtype=float)
    if not mu.sum() > 0:
        raise ConfigError("initial density has no mass on the grid", "keller_segel")
    return x, dx, mu / (mu.sum() * dx)


def run_keller_segel_experiment(cfg: ExperimentConfig, store: ArtifactStore, workers: int) -> Dict:
    k = cfg.section("keller_segel")
    model = cfg.build_keller_segel_model(1.0)
    chem = model.chemistry
    x, dx, mu = _keller_segel_grid(cfg)
    psi = solve_chemical_potential(mu, dx, chem.kappa, chem.diffusivity)
    wanted = {int(round(t / k.dt_time)): t for t in snapshot_times(cfg, k.t_final_time)}
    rows = []
    n_steps = int(round(k.t_final_time / k.dt_time))
    for step in range(n_steps + 1):
        if step in wanted:
            t = step * k.dt_time
            store.fields("keller_segel", len(rows), t, x, {"mu": mu, "psi": psi})
            rows.append({"t": t, "mass": float(mu.sum() * dx), "max_density": float(mu.max())})
        if step < n_steps:
            mu, psi = step_keller_segel(mu, psi, model, k.dt_time, dx, k.drift, k.coefficient)
    return {"drift": k.drift, "snapshots": rows}


# ---------------------------------------------------------------------------
# Comparisons
# ---------------------------------------------------------------------------


def run_compare_pv(cfg: ExperimentConfig, store: ArtifactStore, workers: int) -> Dict:
    """Particles against the Vlasov solution: W2 of the first marginal at each snapshot."""
    model = cfg.build_model()
    _require_1d(model, cfg, "compare_pv")
    icfg = cfg.build_integrator()
    times = snapshot_times(cfg, min(icfg.t_final, cfg.section("grid").t_final_time))
    plan = cfg.build_replica_plan()
    snaps = run_replicas(plan, model, icfg, times, workers)
    n_ref = cfg.sections["rate_study"].n_ref if "rate_study" in cfg.sections else 2000
    rows = []
    for index, (t, rho) in enumerate(solve_vlasov(cfg, model, times)):
        try:
            k = snaps.index_of(t)
        except ValueError as e:
            raise ConfigError(f"kinetic snapshot t={t:.6g} has no particle snapshot; "
                              "both time steps must divide the snapshot times", "output") from e
        store.particles(index, t, snaps.positions[k], snaps.velocities[k])
        estimate = chaos_error(snaps, rho, 1, snaps.times[k], n_ref, cfg.seed)
        rows.append({"t": t, "w2": estimate.value, "estimator": estimate.estimator})
        logger.info(f"compare_pv t={t:.4g}: W2 = {estimate.value:.4e}")
    return {"model": model.describe(), "replicas": plan.replicas,
            "n_particles": plan.n_particles, "rows": rows}


def comparison_times(t_final: float) -> List[float]:
    if t_final <= 0:
        return [0.0]
    return np.linspace(0.0, t_final, COMPARISON_POINTS).tolist()


def monokinetic_start(cfg: ExperimentConfig) -> PhaseDensity:
    """Monokinetic lift of the hydrodynamic initial data onto the kinetic grid."""
    g, h = cfg.section("grid"), cfg.section("hydro")
    if h.n_x != g.n_x or h.x_min_length != g.x_min_length or h.x_max_length != g.x_max_length:
        raise ConfigError("n_x and the x range must match [grid] for comparisons", "hydro")
    law = cfg.build_law()
    dx = (g.x_max_length - g.x_min_length) / g.n_x
    x = g.x_min_length + (np.arange(g.n_x) + 0.5) * dx
    mu0 = np.asarray(law.position_density(x), dtype=float)
    mu0 = mu0 / (mu0.sum() * dx)
    dv = (g.v_max_speed - g.v_min_speed) / g.n_v
    sigma_v = h.sigma_v_speed if h.sigma_v_speed is not None else 4.0 * dv
    return monokinetic_init(mu0, velocity_profile(cfg, law, x), sigma_v,
                            (g.x_min_length, g.x_max_length), (g.v_min_speed, g.v_max_speed), g.n_v)


def kinetic_moment_history(cfg: ExperimentConfig, model: ModelSpec) -> Dict:
    """Density and momentum of the monokinetic Vlasov run at the comparison times."""
    g = cfg.section("grid")
    times = comparison_times(g.t_final_time)
    rho0 = monokinetic_start(cfg)
    if model.kind == ModelKind.CHEMOTAXIS:
        rho0 = rho0.with_values(rho0.values, chem=rho0.zero_field())
    _, snapshots = run_vlasov(rho0, model, g.dt_time, g.t_final_time, times, g.include_decay)
    return {"times": [t for t, _ in snapshots],
            "mu": [moments(r).density for _, r in snapshots],
            "q": [moments(r).momentum for _, r in snapshots],
            "length": rho0.length, "dx": rho0.dx, "start": moments(rho0)}


def euler_mismatch(eps_p: float, cfg: ExperimentConfig, model: ModelSpec, kinetic: Dict) -> Dict:
    """
    Time-averaged relative L1 mismatch of (mu, mu u) between the Euler run with
    pressure eps_p and the kinetic history.
    """
    h = cfg.section("hydro")
    state = HydroState.from_moments(kinetic["start"], kinetic["length"],
                                    with_psi=model.kind == ModelKind.CHEMOTAXIS,
                                    eps=h.eps_scaling, eps_p=eps_p)
    try:
        _, snapshots = run_hydro(state, model, h.dt_time, cfg.section("grid").t_final_time,
                                 kinetic["times"], h.scaled, h.chem_scheme)
    except LabError as e:
        raise annotate(e, f"eps_p={eps_p}") from e
    dx = kinetic["dx"]
    per_time, per_mu, per_q = [], [], []
    for (t, s), mu_v, q_v in zip(snapshots, kinetic["mu"], kinetic["q"]):
        d_mu = l1_distance(s.mu, mu_v, dx)
        d_q = l1_distance(s.q, q_v, dx)
        norm = float(np.sum(np.abs(mu_v)) * dx + np.sum(np.abs(q_v)) * dx)
        per_time.append((d_mu + d_q) / norm)
        per_mu.append(d_mu)
        per_q.append(d_q)
    times = np.asarray(kinetic["times"])
    span = times[-1] - times[0]

    def average(values):
        return float(trapezoid(values, times) / span) if span > 0 else float(values[0])

    return {"eps_p": eps_p, "mismatch": average(per_time), "mismatch_mu": average(per_mu),
            "mismatch_q": average(per_q)}


def run_compare_ve(cfg: ExperimentConfig, store: ArtifactStore, workers: int) -> Dict:
    model = cfg.build_model()
    _require_1d(model, cfg, "compare_ve")
    kinetic = kinetic_moment_history(cfg, model)
    row = euler_mismatch(cfg.section("hydro").eps_p_pressure, cfg, model, kinetic)
    for k, (t, mu, q) in enumerate(zip(kinetic["times"], kinetic["mu"], kinetic["q"])):
        x = kinetic["start"].x
        store.fields("kinetic_moments", k, t, x, {"mu": mu, "q": q})
    logger.info(f"compare_ve mismatch = {row['mismatch']:.4e}")
    return {"model": model.describe(), **row}


def dedupe(values: Sequence[float], label: str) -> List[float]:
    unique = list(dict.fromkeys(float(v) for v in values))
    if len(unique) != len(values):
        logger.warning(f"Dropped {len(values) - len(unique)} duplicate {label} value(s)")
    return unique


def eps_sweep(cfg: ExperimentConfig, workers: int = 1) -> Dict:
    """
    Mismatch between Euler with pressure eps_p and the monokinetic Vlasov run
    for every eps_p of the sweep.

    Returns:
        Dict with the table rows, the argmin and whether it is interior
    """
    model = cfg.build_model()
    _require_1d(model, cfg, "eps_sweep")
    values = dedupe(cfg.section("eps_sweep").eps_p_values, "eps_p")
    kinetic = kinetic_moment_history(cfg, model)
    job = partial(euler_mismatch, cfg=cfg, model=model, kinetic=kinetic)
    rows = parallel_map(job, values, workers)
    best = min(range(len(rows)), key=lambda i: rows[i]["mismatch"])
    ordered = sorted(rows, key=lambda r: r["eps_p"])
    interior = 0 < ordered.index(rows[best]) < len(ordered) - 1
    for row in rows:
        logger.info(f"eps_p={row['eps_p']:.4g}: mismatch {row['mismatch']:.4e}")
    logger.info(f"Best eps_p={rows[best]['eps_p']:.4g} (interior optimum: {interior})")
    return {"model": model.describe(), "rows": rows, "argmin_eps_p": rows[best]["eps_p"],
            "interior_optimum": interior}


def run_eps_sweep(cfg: ExperimentConfig, store: ArtifactStore, workers: int) -> Dict:
    result = eps_sweep(cfg, workers)
    store.json("eps_sweep.json", result, kind="table")
    return result


# ---------------------------------------------------------------------------
# Rate study
# ---------------------------------------------------------------------------


def vlasov_reference(cfg: ExperimentConfig, model: ModelSpec, t: float) -> PhaseDensity:
    """Kinetic solution at time t, cached per config content and time."""
    key = hash_text(f"{cfg.source_hash}:{t!r}")

    def compute():
        return solve_vlasov(cfg, model, [t], t_final=t)[0][1]

    return reference_cache.get_or_compute(key, compute)


def rate_study(cfg: ExperimentConfig, workers: int = 1) -> Dict:
    """
    Distance of the j-marginal to the Vlasov reference for each N, then a
    log-log fit of distance against N.
    """
    model = cfg.build_model()
    _require_1d(model, cfg, "rate_study")
    rs = cfg.section("rate_study")
    t = rs.time
    icfg = replace(cfg.build_integrator(), t_final=t)
    rho_t = vlasov_reference(cfg, model, t)
    rho_0 = vlasov_reference(cfg, model, 0.0)
    raw, floors, pairs = [], [], []
    estimator = "exact"
    for n in sorted(set(rs.n_values)):
        plan = cfg.build_replica_plan(n_particles=n, replicas=rs.replicas)
        try:
            snaps = run_replicas(plan, model, icfg, [0.0, t] if t > 0 else [0.0], workers)
            distance = chaos_error(snaps, rho_t, rs.marginal_order, t, rs.n_ref, cfg.seed,
                                   rs.projections)
            floor = chaos_error(snaps, rho_0, rs.marginal_order, 0.0, rs.n_ref, cfg.seed + 1,
                                rs.projections)
        except LabError as e:
            raise annotate(e, f"N={n}") from e
        estimator = distance.estimator
        value = distance.value
        if rs.subtract_noise_floor:
            value = subtract_noise_floor(distance.value, floor.value)
        raw.append([n, distance.value])
        floors.append([n, floor.value])
        logger.info(f"N={n}: W2={distance.value:.4e} (floor {floor.value:.4e})")
        if value > 0:
            pairs.append((n, value))
        else:
            logger.warning(f"N={n}: distance at the noise floor, left out of the fit")
    if len(pairs) < 4:
        raise NumericalError(f"only {len(pairs)} distance(s) above the noise floor; need 4")
    fit = fit_rate(pairs)
    return {"model": model.kind.value, "t": t, "pairs": [[n, d] for n, d in fit.pairs],
            "alpha_hat": fit.alpha_hat, "C_hat": fit.C_hat, "residual": fit.residual,
            "estimator": estimator, "slope_stderr": fit.slope_stderr,
            "significance": fit.significance, "raw_distances": raw, "noise_floor": floors,
            "marginal_order": rs.marginal_order}


def run_rate_study(cfg: ExperimentConfig, store: ArtifactStore, workers: int) -> Dict:
    result = rate_study(cfg, workers)
    store.json("rate_study.json", result, kind="rate")
    return result


# ---------------------------------------------------------------------------
# Keller-Segel limit
# ---------------------------------------------------------------------------


def scaled_euler_density(eps: float, cfg: ExperimentConfig, mu0: np.ndarray) -> np.ndarray:
    """Density at t_final of the eps-scaled Euler system started at rest."""
    ks, h, k = cfg.section("ks_limit"), cfg.section("hydro"), cfg.section("keller_segel")
    model = cfg.build_keller_segel_model(eps, ks.width_scale)
    length = k.x_max_length - k.x_min_length
    dx = length / k.n_x
    width = model.chemistry.chi.radius
    if width < 4.0 * dx:
        raise ConfigError(f"mollifier width {width:.4g} at eps={eps} is below 4 dx = {4 * dx:.4g}",
                          "ks_limit")
    chem = model.chemistry
    psi0 = solve_chemical_potential(mu0, dx, chem.kappa, chem.diffusivity)
    state = HydroState(k.x_min_length, length, mu0, np.zeros_like(mu0), psi0, eps=eps)
    dt = ks.dt_time if ks.dt_time is not None else h.dt_time
    try:
        final, _ = run_hydro(state, model, dt, k.t_final_time, (), True, h.chem_scheme)
    except LabError as e:
        raise annotate(e, f"eps={eps}") from e
    return final.mu


def ks_limit(cfg: ExperimentConfig, workers: int = 1) -> Dict:
    """L1 distance at t_final between the eps-scaled Euler runs and the Keller-Segel run."""
    k = cfg.section("keller_segel")
    h = cfg.section("hydro")
    if h.n_x != k.n_x or h.x_min_length != k.x_min_length or h.x_max_length != k.x_max_length:
        raise ConfigError("n_x and the x range must match [keller_segel]", "hydro")
    x, dx, mu0 = _keller_segel_grid(cfg)
    values = sorted(dedupe(cfg.section("ks_limit").eps_values, "eps"), reverse=True)
    reference, _ = run_keller_segel(mu0, cfg.build_keller_segel_model(1.0), k.dt_time, dx,
                                    k.t_final_time, k.drift, k.coefficient)
    densities = parallel_map(partial(scaled_euler_density, cfg=cfg, mu0=mu0), values, workers)
    rows = [{"eps": eps, "l1_distance": l1_distance(mu, reference, dx)}
            for eps, mu in zip(values, densities)]
    distances = [r["l1_distance"] for r in rows]
    monotone = all(b <= a for a, b in zip(distances, distances[1:]))
    logger.info(f"Keller-Segel limit distances {distances} (monotone: {monotone})")
    return {"rows": rows, "monotone": monotone, "t": k.t_final_time, "x": x,
            "reference": reference, "densities": densities}


def run_ks_limit(cfg: ExperimentConfig, store: ArtifactStore, workers: int) -> Dict:
    result = ks_limit(cfg, workers)
    columns = {"mu_ks": result.pop("reference")}
    for row, mu in zip(result["rows"], result.pop("densities")):
        columns[f"mu_eps_{row['eps']:g}"] = mu
    store.fields("ks_limit", 0, result["t"], result.pop("x"), columns)
    return result


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


RECIPES: Dict[Experiment, Callable[[ExperimentConfig, ArtifactStore, int], Dict]] = {
    Experiment.PARTICLES: run_particles,
    Experiment.VLASOV: run_vlasov_experiment,
    Experiment.EULER: run_euler,
    Experiment.KELLER_SEGEL: run_keller_segel_experiment,
    Experiment.COMPARE_PV: run_compare_pv,
    Experiment.COMPARE_VE: run_compare_ve,
    Experiment.RATE_STUDY: run_rate_study,
    Experiment.EPS_SWEEP: run_eps_sweep,
    Experiment.KS_LIMIT: run_ks_limit,
}


def run_experiment(cfg: ExperimentConfig, experiment: Optional[Experiment] = None) -> Dict:
    """
    Execute one experiment and write its artifacts.

    Args:
        cfg: Validated configuration
        experiment: Overrides the ``experiment`` key (used by subcommands)

    Returns:
        The summary dictionary
    """
    experiment = Experiment(experiment or cfg.experiment)
    for name in REQUIRED_SECTIONS[experiment]:
        if not cfg.has(name):
            raise ConfigError(f"required by experiment '{experiment.value}' but missing", name)
    workers = resolve_workers(cfg.run.workers)
    store = ArtifactStore(cfg.output_dir)
    logger.info(f"Starting {experiment.value} with {workers} worker(s), seed {cfg.seed}")
    summary = RECIPES[experiment](cfg, store, workers)
    summary = {"experiment": experiment.value, "seed": cfg.seed, **summary}
    store.json("summary.json", summary)
    store.write_manifest(cfg.source_hash, cfg.seed, experiment.value)
    logger.info(f"Finished {experiment.value}; artifacts in {store.output_dir}")
    return summary
