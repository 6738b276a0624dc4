"""
Unit tests for particle time stepping, the chemical field and replica runs.
"""

import numpy as np
import pytest

from meanfield_lab.errors import CFLViolation, ConfigError, ModelError
from meanfield_lab.kernels import HarmonicPotential
from meanfield_lab.laws import GaussianLaw, UniformBoxLaw
from meanfield_lab.model import (
    AlignmentParams, Boundary, ChemicalField, ChemistryParams, ModelKind, ModelSpec,
    ParticleEnsemble, keller_segel_model, total_energy, velocity_diameter,
)
from meanfield_lab.particles import (
    IntegratorConfig, ReplicaPlan, Scheme, initial_ensemble, particle_generator, run_replicas,
    step_chemical, step_particles,
)


@pytest.fixture
def harmonic_model():
    return ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(1.0))


@pytest.fixture
def flocking_model():
    return ModelSpec(ModelKind.CUCKER_SMALE, alignment=AlignmentParams(1.0, 1.0, 0.5))


class TestStepParticles:
    """Tests for step_particles."""

    def test_energy_conservation_rk4(self, harmonic_model):
        """Test that RK4 conserves the Hamiltonian energy on a harmonic system."""
        rng = np.random.default_rng(0)
        ens = ParticleEnsemble(rng.normal(size=(8, 1)), rng.normal(size=(8, 1)), 1.0)
        cfg = IntegratorConfig(dt=1e-3, t_final=1.0)
        start = total_energy(harmonic_model, ens)
        for _ in range(cfg.n_steps):
            ens = step_particles(ens, harmonic_model, cfg)
        assert abs(total_energy(harmonic_model, ens) - start) <= 1e-6

    def test_two_body_harmonic_period(self, harmonic_model):
        """Test the N = 2 harmonic pair against its closed form with period 2 pi."""
        ens = ParticleEnsemble([[0.0], [1.0]], [[0.0], [0.0]], 1.0)
        cfg = IntegratorConfig(dt=2 * np.pi / 1000, t_final=2 * np.pi)
        times = np.arange(1, cfg.n_steps + 1) * cfg.dt
        for t in times:
            ens = step_particles(ens, harmonic_model, cfg)
            # relative coordinate r'' = -r about the fixed centre of mass 1/2
            half = 0.5 * np.cos(t)
            np.testing.assert_allclose(ens.positions[:, 0], [0.5 - half, 0.5 + half], atol=1e-8)
        np.testing.assert_allclose(ens.positions[:, 0], [0.0, 1.0], atol=1e-8)
        np.testing.assert_allclose(ens.velocities[:, 0], [0.0, 0.0], atol=1e-8)

    def test_velocity_diameter_non_increasing(self, flocking_model):
        """Test that aligning Cucker-Smale dynamics never widens the velocity spread."""
        rng = np.random.default_rng(1)
        ens = ParticleEnsemble(rng.normal(size=(10, 2)), rng.normal(size=(10, 2)), 1.0)
        cfg = IntegratorConfig(dt=0.01, t_final=1.0)
        previous = velocity_diameter(ens.velocities)
        for _ in range(cfg.n_steps):
            ens = step_particles(ens, flocking_model, cfg)
            current = velocity_diameter(ens.velocities)
            assert current <= previous + 1e-12
            previous = current

    def test_free_transport(self):
        """Test that zero force moves particles in straight lines."""
        model = ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(0.0))
        ens = ParticleEnsemble([[0.0], [1.0]], [[1.0], [-2.0]], 1.0)
        cfg = IntegratorConfig(dt=0.1, t_final=1.0)
        for _ in range(10):
            ens = step_particles(ens, model, cfg)
        np.testing.assert_allclose(ens.positions, [[1.0], [-1.0]], atol=1e-12)

    def test_periodic_wrap(self):
        """Test that positions stay inside a periodic box."""
        model = ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(0.0))
        ens = ParticleEnsemble([[0.9]], [[1.0]], 1.0)
        cfg = IntegratorConfig(dt=0.5, t_final=0.5, boundary="periodic", box_length=1.0)
        ens = step_particles(ens, model, cfg)
        assert ens.positions[0, 0] == pytest.approx(0.4)

    def test_semi_implicit_stability_guard(self, harmonic_model):
        """Test that semi-implicit Euler refuses a step beyond the Lipschitz bound."""
        ens = ParticleEnsemble([[0.0], [1.0]], [[0.0], [0.0]], 1.0)
        cfg = IntegratorConfig(dt=2.0, t_final=2.0, scheme=Scheme.SEMI_IMPLICIT_EULER)
        with pytest.raises(CFLViolation):
            step_particles(ens, harmonic_model, cfg)

    def test_chemotaxis_needs_field(self):
        """Test that a chemotaxis step without a field is rejected."""
        ens = ParticleEnsemble([[0.0], [0.1]], [[0.0], [0.0]], 1.0)
        with pytest.raises(ModelError):
            step_particles(ens, keller_segel_model(0.5), IntegratorConfig(dt=0.01, t_final=0.01))

    def test_chemotaxis_step_updates_field(self):
        """Test that particles feed the chemical field during a step."""
        model = keller_segel_model(0.5)
        cfg = IntegratorConfig(dt=0.001, t_final=0.001, boundary="periodic", box_length=4.0,
                               chem_nodes=32)
        field = cfg.initial_field(1)
        ens = ParticleEnsemble([[1.0], [2.0]], [[0.0], [0.0]], 1.0, field)
        ens = step_particles(ens, model, cfg)
        assert ens.chem.values.max() > 0


class TestStepChemical:
    """Tests for step_chemical."""

    def _model(self, kappa=1.0, diffusivity=0.1):
        return ModelSpec(ModelKind.CHEMOTAXIS,
                         chemistry=ChemistryParams(eta=1.0, kappa=kappa, diffusivity=diffusivity))

    def test_constant_source_steady_state(self):
        """Test that a constant source relaxes to c / kappa."""
        model = self._model(kappa=2.0)
        field = ChemicalField.zeros([0.0], 1.0, 10, 1)
        for _ in range(2000):
            field = step_chemical(field, np.zeros((1, 1)), model, 0.01, source_field=3.0)
        np.testing.assert_allclose(field.values, 1.5, rtol=1e-6)

    def test_zero_source_keeps_zero_field(self):
        """Test that a zero field with zero source stays exactly zero."""
        model = self._model()
        field = ChemicalField.zeros([0.0, 0.0], 1.0, 8, 2, Boundary.NEUMANN)
        for _ in range(10):
            field = step_chemical(field, np.zeros((1, 2)), model, 0.001, source_field=0.0)
        assert np.all(field.values == 0.0)

    def test_point_release_spreads_like_heat_kernel(self):
        """Test that a point release keeps its mass and its variance grows as 2 D t."""
        model = self._model(kappa=0.0, diffusivity=0.1)
        field = ChemicalField.zeros([-1.0], 2.0, 201, 1)
        values = np.zeros(201)
        values[100] = 1.0 / field.spacing
        field = field.with_values(values)
        x = field.axes()[0] - field.axes()[0][100]
        dt_c = 2e-4
        peak = field.values.max()
        for step in range(1, 201):
            field = step_chemical(field, np.zeros((1, 1)), model, dt_c, source_field=0.0)
            mass = field.values.sum() * field.spacing
            variance = (x ** 2 * field.values).sum() * field.spacing / mass
            assert mass == pytest.approx(1.0, rel=1e-12)
            assert variance == pytest.approx(2 * 0.1 * step * dt_c, rel=1e-9)
            assert field.values.max() < peak
            peak = field.values.max()

    def test_diffusion_limit(self):
        """Test that an unstable diffusion number raises CFLViolation."""
        model = self._model(diffusivity=1.0)
        field = ChemicalField.zeros([0.0], 1.0, 10, 1)
        with pytest.raises(CFLViolation) as info:
            step_chemical(field, np.zeros((1, 1)), model, 0.01)
        assert info.value.section == "integrator"

    def test_particle_source_has_unit_mass(self):
        """Test that one step from zero deposits dt worth of unit-mass source."""
        model = self._model(kappa=0.0, diffusivity=0.0)
        field = ChemicalField.zeros([0.0], 4.0, 200, 1)
        field = step_chemical(field, np.array([[2.0], [1.0]]), model, 0.1)
        assert field.values.sum() * field.spacing == pytest.approx(0.1, rel=1e-3)


class TestReplicas:
    """Tests for seeded replica ensembles."""

    def _plan(self, n=6, replicas=3, seed=42):
        return ReplicaPlan(replicas=replicas, seed=seed, law=GaussianLaw(0.0, 1.0, 0.0, 0.5),
                           n_particles=n)

    def test_zero_final_time_gives_initial_snapshot(self, harmonic_model):
        """Test that T_final = 0 returns only the initial state."""
        cfg = IntegratorConfig(dt=0.01, t_final=0.0)
        snaps = run_replicas(self._plan(), harmonic_model, cfg, [0.0])
        assert snaps.positions.shape == (1, 3, 6, 1)
        first = initial_ensemble(self._plan(), harmonic_model, cfg, 0)
        np.testing.assert_array_equal(snaps.positions[0, 0], first.positions)

    def test_deterministic(self, harmonic_model):
        """Test that identical plans give identical snapshots."""
        cfg = IntegratorConfig(dt=0.01, t_final=0.1)
        a = run_replicas(self._plan(), harmonic_model, cfg, [0.0, 0.1])
        b = run_replicas(self._plan(), harmonic_model, cfg, [0.0, 0.1])
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.velocities, b.velocities)

    def test_worker_count_does_not_change_results(self, harmonic_model):
        """Test that the process fan-out reproduces the in-process run."""
        cfg = IntegratorConfig(dt=0.01, t_final=0.05)
        serial = run_replicas(self._plan(replicas=4), harmonic_model, cfg, [0.05], workers=1)
        pooled = run_replicas(self._plan(replicas=4), harmonic_model, cfg, [0.05], workers=2)
        np.testing.assert_array_equal(serial.positions, pooled.positions)

    def test_replicas_differ(self, harmonic_model):
        """Test that different replicas draw different initial states."""
        cfg = IntegratorConfig(dt=0.01, t_final=0.0)
        snaps = run_replicas(self._plan(), harmonic_model, cfg, [0.0])
        assert not np.array_equal(snaps.positions[0, 0], snaps.positions[0, 1])

    def test_particle_prefix_independent_of_n(self, harmonic_model):
        """Test that particle i gets the same initial draw whatever N is."""
        cfg = IntegratorConfig(dt=0.01, t_final=0.0)
        small = initial_ensemble(self._plan(n=4), harmonic_model, cfg, 1)
        large = initial_ensemble(self._plan(n=9), harmonic_model, cfg, 1)
        np.testing.assert_array_equal(small.positions, large.positions[:4])

    def test_generator_keyed_by_seed_replica_and_particle(self):
        """Test that every (seed, replica, particle) key opens its own stream."""
        a = particle_generator(7, 0, 0).random(4)
        assert np.array_equal(a, particle_generator(7, 0, 0).random(4))
        for other in [(7, 1, 0), (8, 0, 0), (7, 0, 1)]:
            assert not np.array_equal(a, particle_generator(*other).random(4))

    def test_particle_draws_come_from_their_own_stream(self, harmonic_model):
        """Test that particle i of replica r holds the draws of stream (seed, r, i)."""
        plan = self._plan(n=5, seed=11)
        ens = initial_ensemble(plan, harmonic_model, IntegratorConfig(dt=0.01, t_final=0.0), 2)
        draws = particle_generator(11, 2, 3).standard_normal(2)
        assert ens.positions[3, 0] == pytest.approx(draws[0])
        assert ens.velocities[3, 0] == pytest.approx(0.5 * draws[1])

    def test_free_motion_monte_carlo_moments(self):
        """Test the mean and variance of x_0 + t v_0 over 10^4 force-free replicas."""
        model = ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(0.0))
        plan = ReplicaPlan(replicas=10_000, seed=17, law=GaussianLaw(0.5, 1.0, 1.0, 0.5),
                           n_particles=1)
        snaps = run_replicas(plan, model, IntegratorConfig(dt=0.25, t_final=1.0), [1.0])
        x = snaps.positions[0, :, 0, 0]
        # x(1) ~ N(0.5 + 1.0, 1.0 + 0.25)
        std_error = np.sqrt(1.25 / x.size)
        assert abs(x.mean() - 1.5) < 4 * std_error
        assert x.var(ddof=1) == pytest.approx(1.25, rel=4 * np.sqrt(2.0 / x.size))

    def test_snapshot_beyond_final_time(self, harmonic_model):
        """Test that snapshots after T_final are a configuration error."""
        cfg = IntegratorConfig(dt=0.01, t_final=0.1)
        with pytest.raises(ConfigError):
            run_replicas(self._plan(), harmonic_model, cfg, [0.2])

    def test_periodic_initial_positions_wrapped(self, harmonic_model):
        """Test that initial samples are folded into a periodic box."""
        plan = ReplicaPlan(replicas=1, seed=3, law=UniformBoxLaw(-5.0, 5.0, -1.0, 1.0),
                           n_particles=50)
        cfg = IntegratorConfig(dt=0.01, t_final=0.0, boundary="periodic", box_lower=0.0,
                               box_length=2.0)
        ens = initial_ensemble(plan, harmonic_model, cfg, 0)
        assert np.all((ens.positions >= 0.0) & (ens.positions < 2.0))

    def test_bad_plan(self):
        """Test that empty plans are rejected."""
        with pytest.raises(ConfigError):
            ReplicaPlan(replicas=0, seed=1, law=GaussianLaw(), n_particles=4)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
