"""
Unit tests for the phase-space (Vlasov) solver.
"""

import numpy as np
import pytest
from scipy import stats

from meanfield_lab.errors import CFLViolation, ModelError
from meanfield_lab.kernels import HarmonicPotential
from meanfield_lab.kinetic import (
    PhaseDensity, advance_kinetic_chemistry, mean_field_coefficients, moments, remap_bounded,
    remap_periodic, run_vlasov, step_vlasov, vlasov_force_field,
)
from meanfield_lab.laws import GaussianLaw
from meanfield_lab.model import (
    AgentParams, AlignmentParams, ModelKind, ModelSpec, keller_segel_model,
)

X_RANGE = (-np.pi, np.pi)
V_RANGE = (-3.0, 3.0)


def gaussian_density(x, v, std_x=0.5, std_v=0.5):
    return stats.norm.pdf(x, 0.0, std_x) * stats.norm.pdf(v, 0.0, std_v)


def free_model():
    return ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(0.0))


def wrap(x):
    return X_RANGE[0] + np.mod(x - X_RANGE[0], X_RANGE[1] - X_RANGE[0])


def free_transport_error(n_x, n_v, dt, t_final=1.0):
    rho0 = PhaseDensity.from_function(gaussian_density, n_x, n_v, X_RANGE, V_RANGE)
    final, _ = run_vlasov(rho0, free_model(), dt, t_final)
    exact = PhaseDensity.from_function(lambda x, v: gaussian_density(wrap(x - v * t_final), v),
                                       n_x, n_v, X_RANGE, V_RANGE)
    return float(np.abs(final.values - exact.values).sum() * rho0.dx * rho0.dv)


class TestPhaseDensity:
    """Tests for PhaseDensity construction and moments."""

    def test_from_law_has_unit_mass(self):
        """Test that sampled densities are renormalised."""
        rho = PhaseDensity.from_law(GaussianLaw(0.0, 0.5, 0.0, 0.5), 32, 32, X_RANGE, V_RANGE)
        assert rho.mass == pytest.approx(1.0, rel=1e-12)

    def test_with_chem_adds_zero_field(self):
        """Test that with_chem attaches a zero field on the x cells."""
        rho = PhaseDensity.from_function(gaussian_density, 16, 16, X_RANGE, V_RANGE, with_chem=True)
        assert rho.chem.values.shape == (16,)
        np.testing.assert_allclose(rho.chem.axes()[0], rho.x)

    def test_too_small_grid(self):
        """Test that grids below 4 cells per axis are rejected."""
        with pytest.raises(ModelError):
            PhaseDensity(0.0, 1.0, -1.0, 1.0, np.ones((3, 8)))

    def test_boundary_warning(self, caplog):
        """Test the warning for density touching the velocity boundary."""
        PhaseDensity.from_function(lambda x, v: np.ones_like(x * v), 8, 8, X_RANGE, V_RANGE)
        assert "velocity boundary" in caplog.text

    def test_moments_of_shifted_gaussian(self):
        """Test density and mean velocity of a drifting Maxwellian."""
        rho = PhaseDensity.from_function(
            lambda x, v: stats.norm.pdf(v, 0.4, 0.3) * np.ones_like(x), 16, 128, X_RANGE, V_RANGE)
        fields = moments(rho)
        np.testing.assert_allclose(fields.density, 1.0 / (2 * np.pi), rtol=1e-10)
        np.testing.assert_allclose(fields.velocity, 0.4, atol=1e-8)


class TestForceField:
    """Tests for the self-consistent force."""

    def test_harmonic_attraction(self):
        """Test a(x) = -(x - mean) near a concentrated density."""
        rho = PhaseDensity.from_function(lambda x, v: gaussian_density(x, v, 0.3), 128, 32,
                                         X_RANGE, V_RANGE)
        force = vlasov_force_field(rho, ModelSpec(ModelKind.TWO_BODY,
                                                  potential=HarmonicPotential(1.0)))
        near = np.abs(rho.x) < 1.0
        np.testing.assert_allclose(force.a[near], -rho.x[near], atol=1e-6)
        np.testing.assert_allclose(force.b, 0.0)

    def test_uniform_density_has_no_pair_force(self):
        """Test that a uniform density feels no net pair force on the periodic grid."""
        x = -np.pi + (np.arange(64) + 0.5) * 2 * np.pi / 64
        density = np.full(64, 1.0 / (2 * np.pi))
        model = ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(1.0))
        a, b = mean_field_coefficients(x, 2 * np.pi / 64, 2 * np.pi, density,
                                       np.zeros(64), model)
        np.testing.assert_allclose(a, 0.0, atol=1e-12)

    def test_alignment_relaxes_to_mean_momentum(self):
        """Test that constant alignment weight pulls v toward the mean velocity."""
        rho = PhaseDensity.from_function(lambda x, v: stats.norm.pdf(v, 0.5, 0.3) * np.ones_like(x),
                                         16, 64, X_RANGE, V_RANGE)
        model = ModelSpec(ModelKind.CUCKER_SMALE, alignment=AlignmentParams(1.0, 1e6, 0.5))
        force = vlasov_force_field(rho, model)
        np.testing.assert_allclose(force.a, 0.5, atol=1e-6)
        np.testing.assert_allclose(force.b, 1.0, atol=1e-6)

    def test_friction_and_inertia(self):
        """Test that friction adds 1 to b and everything is divided by eps."""
        rho = PhaseDensity.from_function(gaussian_density, 16, 16, X_RANGE, V_RANGE)
        model = ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(0.0), friction=True,
                          mass_scale=0.25)
        force = vlasov_force_field(rho, model)
        np.testing.assert_allclose(force.b, 4.0)

    def test_multi_agent_rejected(self):
        """Test that multi-agent systems have no kinetic equation."""
        rho = PhaseDensity.from_function(gaussian_density, 8, 8, X_RANGE, V_RANGE)
        with pytest.raises(ModelError):
            vlasov_force_field(rho, ModelSpec(ModelKind.MULTI_AGENT, agent=AgentParams()))

    def test_chemotaxis_needs_field(self):
        """Test that the chemotaxis force needs a chemical field."""
        rho = PhaseDensity.from_function(gaussian_density, 8, 8, X_RANGE, V_RANGE)
        with pytest.raises(ModelError):
            vlasov_force_field(rho, keller_segel_model(0.5))


class TestRemaps:
    """Tests for the conservative remaps."""

    def test_periodic_remap_shift_by_whole_cells(self):
        """Test that shifting by an integer number of cells is a roll."""
        masses = np.random.default_rng(0).random((16, 3))
        edges = np.arange(17) / 16.0
        feet = edges[:, None] - 2.0 / 16.0
        shifted = remap_periodic(masses, 0.0, 1.0, np.repeat(feet, 3, axis=1))
        np.testing.assert_allclose(shifted, np.roll(masses, 2, axis=0), atol=1e-12)

    def test_periodic_remap_conserves_columns(self):
        """Test that column totals are preserved for any displacement."""
        masses = np.random.default_rng(1).random((20, 4))
        edges = np.arange(21) / 20.0
        feet = edges[:, None] - np.array([0.013, -0.4, 1.7, 0.0])[None, :]
        remapped = remap_periodic(masses, 0.0, 1.0, feet)
        np.testing.assert_allclose(remapped.sum(axis=0), masses.sum(axis=0), rtol=1e-12)

    def test_bounded_remap_identity(self):
        """Test that feet at the edges reproduce the masses."""
        masses = np.random.default_rng(2).random((12, 2))
        edges = np.linspace(-1.0, 1.0, 13)
        remapped = remap_bounded(masses, -1.0, 1.0, np.repeat(edges[:, None], 2, axis=1))
        np.testing.assert_allclose(remapped, masses, atol=1e-12)


class TestStepVlasov:
    """Tests for step_vlasov and run_vlasov."""

    def test_free_transport_accuracy(self):
        """Test zero force against the closed-form shift."""
        assert free_transport_error(128, 64, 0.0125) <= 2e-2

    @pytest.mark.slow
    def test_free_transport_convergence(self):
        """Test the error ratio when the x resolution doubles."""
        coarse = free_transport_error(128, 128, 0.005)
        fine = free_transport_error(256, 128, 0.005)
        assert fine <= 5e-3
        assert coarse / fine >= 3.5

    def test_uniform_state_is_stationary(self):
        """Test that a spatially uniform density is a steady state of the harmonic system."""
        rho = PhaseDensity.from_function(lambda x, v: stats.norm.pdf(v, 0.0, 0.5) * np.ones_like(x),
                                         32, 32, X_RANGE, V_RANGE)
        model = ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(1.0))
        final, _ = run_vlasov(rho, model, 0.05, 0.5)
        np.testing.assert_allclose(final.values, rho.values, atol=1e-12)

    def test_mass_conservation(self):
        """Test that mass stays within tolerance over a harmonic run."""
        rho = PhaseDensity.from_function(gaussian_density, 64, 64, X_RANGE, V_RANGE)
        model = ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(1.0))
        final, snapshots = run_vlasov(rho, model, 0.02, 0.4, [0.0, 0.2, 0.4])
        assert [t for t, _ in snapshots] == pytest.approx([0.0, 0.2, 0.4])
        assert abs(final.mass - 1.0) <= 20 * 1e-8
        assert final.time == pytest.approx(0.4)
        assert np.all(final.values >= 0)

    def test_harmonic_centre_of_mass_at_rest(self):
        """Test that a centred symmetric density keeps zero momentum."""
        rho = PhaseDensity.from_function(gaussian_density, 64, 64, X_RANGE, V_RANGE)
        model = ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(1.0))
        final, _ = run_vlasov(rho, model, 0.02, 0.2)
        assert abs(moments(final).momentum.sum() * final.dx) <= 1e-10

    def test_transport_cfl(self):
        """Test that a step beyond the transport CFL is rejected."""
        rho = PhaseDensity.from_function(gaussian_density, 64, 16, X_RANGE, V_RANGE)
        with pytest.raises(CFLViolation) as info:
            step_vlasov(rho, free_model(), 0.5)
        assert info.value.section == "vlasov"

    def test_chemotaxis_run_conserves_mass(self):
        """Test a short chemotaxis run with the kinetic chemical field."""
        rho = PhaseDensity.from_function(gaussian_density, 64, 64, X_RANGE, (-4.0, 4.0),
                                         with_chem=True)
        final, _ = run_vlasov(rho, keller_segel_model(0.5), 0.005, 0.05)
        assert abs(final.mass - 1.0) <= 10 * 1e-8
        assert final.chem.values.max() > 0

    def test_kinetic_chemistry_without_decay(self):
        """Test that dropping decay grows the field faster than keeping it."""
        rho = PhaseDensity.from_function(gaussian_density, 32, 16, X_RANGE, V_RANGE,
                                         with_chem=True)
        model = keller_segel_model(1.0, kappa=2.0)
        with_decay = advance_kinetic_chemistry(rho, model, 0.1, include_decay=True)
        without = advance_kinetic_chemistry(rho, model, 0.1, include_decay=False)
        # zero start: the decay term only acts after the first substep
        assert without.values.sum() >= with_decay.values.sum()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
