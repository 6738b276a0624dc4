"""
Unit tests for force evaluation, the rank function and the chemical gradient.
"""

import numpy as np
import pytest

from meanfield_lab.errors import ModelError, NonFiniteStateError
from meanfield_lab.kernels import ClampedLinearKernel, HarmonicPotential, create_potential
from meanfield_lab.model import (
    AgentParams, AlignmentParams, Boundary, ChemicalField, ChemistryParams, ModelKind, ModelSpec,
    ParticleEnsemble, chem_gradient, eval_force, interaction_forces, keller_segel_model,
    rank_function, total_energy, total_momentum, velocity_diameter,
)


def ensemble(x, v=None, masses=1.0, chem=None):
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    v = np.zeros_like(x) if v is None else np.asarray(v, dtype=float).reshape(x.shape)
    return ParticleEnsemble(x, v, masses, chem)


class TestEvalForce:
    """Tests for eval_force."""

    def test_two_body_printed_sign(self):
        """Test F_1 = (1/2)(gradV(0) + gradV(-1)) = -0.5 with the printed sign."""
        model = ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(1.0), two_body_sign=1)
        np.testing.assert_allclose(eval_force(model, ensemble([0.0, 1.0]), 0), [-0.5])

    def test_two_body_hamiltonian_sign(self):
        """Test that the default Hamiltonian sign flips the printed result."""
        model = ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(1.0))
        np.testing.assert_allclose(eval_force(model, ensemble([0.0, 1.0]), 0), [0.5])

    def test_cucker_smale_printed_sign(self):
        """Test F_1 = (1/2)(1/(1+1))(1-0) = 0.25 with the printed convention."""
        model = ModelSpec(ModelKind.CUCKER_SMALE, alignment=AlignmentParams(1.0, 1.0, 1.0),
                          sign_convention=1)
        ens = ensemble([0.0, 1.0], [1.0, 0.0])
        np.testing.assert_allclose(eval_force(model, ens, 0), [0.25])

    def test_cucker_smale_aligns_by_default(self):
        """Test that the default convention pulls the fast particle back."""
        model = ModelSpec(ModelKind.CUCKER_SMALE, alignment=AlignmentParams(1.0, 1.0, 1.0))
        ens = ensemble([0.0, 1.0], [1.0, 0.0])
        assert eval_force(model, ens, 0)[0] == pytest.approx(-0.25)

    @pytest.mark.parametrize("kind", ["two_body", "cucker_smale", "topological"])
    def test_coincident_state_has_zero_force(self, kind):
        """Test that equal positions and velocities give zero force."""
        model = ModelSpec(kind, potential=HarmonicPotential(1.0),
                          alignment=AlignmentParams(), rank_kernel=ClampedLinearKernel())
        ens = ensemble([0.3, 0.3, 0.3], [1.0, 1.0, 1.0])
        for i in range(3):
            np.testing.assert_array_equal(eval_force(model, ens, i), [0.0])

    def test_two_body_momentum_balance(self):
        """Test that odd gradients give forces summing to zero."""
        rng = np.random.default_rng(1)
        model = ModelSpec(ModelKind.TWO_BODY, potential=create_potential("morse", 2))
        x = rng.normal(size=(12, 2))
        forces = interaction_forces(model, x, np.zeros_like(x))
        np.testing.assert_allclose(forces.sum(axis=0), 0.0, atol=1e-12)

    def test_permutation_equivariance(self):
        """Test that permuting particles permutes the forces."""
        rng = np.random.default_rng(2)
        model = ModelSpec(ModelKind.TOPOLOGICAL, rank_kernel=ClampedLinearKernel(1.0, 0.5))
        x, v = rng.normal(size=(9, 1)), rng.normal(size=(9, 1))
        perm = rng.permutation(9)
        forces = interaction_forces(model, x, v)
        np.testing.assert_allclose(interaction_forces(model, x[perm], v[perm]), forces[perm])

    def test_equal_velocities_give_no_alignment(self):
        """Test that alignment forces vanish when all velocities agree."""
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 2))
        v = np.tile([0.4, -0.1], (6, 1))
        for model in (ModelSpec(ModelKind.CUCKER_SMALE, alignment=AlignmentParams()),
                      ModelSpec(ModelKind.TOPOLOGICAL, rank_kernel=ClampedLinearKernel())):
            np.testing.assert_allclose(interaction_forces(model, x, v), 0.0, atol=1e-15)

    def test_friction_subtracts_velocity(self):
        """Test the friction variant adds -v_i."""
        model = ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(0.0), friction=True)
        ens = ensemble([0.0, 1.0], [2.0, -1.0])
        np.testing.assert_allclose(eval_force(model, ens, 0), [-2.0])

    def test_multi_agent_krause_pull(self):
        """Test the bounded-confidence kernel moves an opinion toward a close neighbour."""
        model = ModelSpec(ModelKind.MULTI_AGENT, agent=AgentParams("uniform", confidence=2.0))
        ens = ensemble([0.0, 0.0], [0.0, 1.0])
        assert eval_force(model, ens, 0)[0] > 0

    def test_chemotaxis_needs_field(self):
        """Test that chemotaxis without a chemical field is rejected."""
        model = keller_segel_model(0.5)
        with pytest.raises(ModelError):
            eval_force(model, ensemble([0.0, 1.0]), 0)

    def test_chemotaxis_adds_eta_gradient(self):
        """Test that the chemical term is eta times the field gradient."""
        field = ChemicalField([0.0], 0.1, 3.0 * (np.arange(20) * 0.1), Boundary.NEUMANN)
        model = ModelSpec(ModelKind.CHEMOTAXIS, chemistry=ChemistryParams(eta=2.0))
        ens = ensemble([0.5, 0.5], chem=field)
        np.testing.assert_allclose(eval_force(model, ens, 0), [6.0], rtol=1e-12)

    def test_index_out_of_range(self):
        """Test that a bad index raises IndexError."""
        model = ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential())
        with pytest.raises(IndexError):
            eval_force(model, ensemble([0.0, 1.0]), 2)

    def test_force_respects_lipschitz_bound(self):
        """Test that finite differences of the force stay under the declared bound."""
        rng = np.random.default_rng(4)
        model = ModelSpec(ModelKind.CUCKER_SMALE, alignment=AlignmentParams(1.0, 1.0, 0.5),
                          potential=HarmonicPotential(1.0))
        x, v = rng.normal(size=(8, 1)), rng.normal(size=(8, 1))
        base = interaction_forces(model, x, v)
        bound = model.lipschitz_bound(float(np.max(np.abs(v))) + 1.0)
        for _ in range(10):
            dx, dv = 1e-4 * rng.normal(size=x.shape), 1e-4 * rng.normal(size=v.shape)
            delta = interaction_forces(model, x + dx, v + dv) - base
            step = np.max(np.abs(np.concatenate([dx, dv])))
            assert np.max(np.abs(delta)) <= 2.0 * bound * step


class TestModelSpec:
    """Tests for ModelSpec validation."""

    def test_missing_potential(self):
        """Test that a two-body model needs a potential."""
        with pytest.raises(ModelError):
            ModelSpec(ModelKind.TWO_BODY)

    def test_bad_sign(self):
        """Test that signs other than +-1 are rejected."""
        with pytest.raises(ModelError):
            ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(), two_body_sign=0)

    def test_mass_scale_range(self):
        """Test that eps must lie in (0, 1]."""
        with pytest.raises(ModelError):
            ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(), mass_scale=1.5)

    def test_keller_segel_model(self):
        """Test the eps-scaled chemotaxis model carries friction and sqrt(eps) widths."""
        model = keller_segel_model(0.04, width_scale=1.0)
        assert model.friction
        assert model.inertia == pytest.approx(0.04)
        assert model.chemistry.chi.radius == pytest.approx(0.2)
        assert model.describe()["eps"] == pytest.approx(0.04)


class TestRankFunction:
    """Tests for rank_function."""

    def test_examples(self):
        """Test the enumerated examples on X = (0, 1, 2)."""
        ens = ensemble([0.0, 1.0, 2.0])
        assert rank_function(ens, 0, 1.0) == pytest.approx(2.0 / 3.0)
        assert rank_function(ens, 0, 10.0) == 1.0

    def test_zero_radius_counts_coincident_points(self):
        """Test that r = 0 counts the multiplicity of x_i."""
        ens = ensemble([0.5, 0.5, 1.0, 2.0])
        assert rank_function(ens, 0, 0.0) == pytest.approx(0.5)
        assert rank_function(ens, 3, 0.0) == pytest.approx(0.25)

    def test_monotone_in_radius(self):
        """Test that the rank is non-decreasing with jumps of multiples of 1/N."""
        rng = np.random.default_rng(5)
        ens = ensemble(rng.normal(size=10))
        values = [rank_function(ens, 3, r) for r in np.linspace(0.0, 5.0, 200)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        np.testing.assert_allclose(np.array(values) * 10, np.round(np.array(values) * 10))

    def test_negative_radius(self):
        """Test that r < 0 is rejected."""
        with pytest.raises(ModelError):
            rank_function(ensemble([0.0]), 0, -1.0)


class TestChemGradient:
    """Tests for chem_gradient."""

    def test_linear_field(self):
        """Test that a linear field gives its slope."""
        nodes = np.linspace(-1.0, 1.0, 21)
        field = ChemicalField([-1.0], 0.1, 2.0 * nodes, Boundary.NEUMANN)
        np.testing.assert_allclose(chem_gradient(field, np.array([0.33])), [2.0], rtol=1e-10)

    def test_constant_field(self):
        """Test that a constant field has zero gradient."""
        field = ChemicalField([0.0], 0.1, np.full(10, 4.0), Boundary.PERIODIC)
        np.testing.assert_allclose(chem_gradient(field, np.array([[0.37], [0.95]])), 0.0)

    def test_quadratic_field(self):
        """Test d/dx x^2 at 0.5 on [-1, 1]."""
        nodes = np.linspace(-1.0, 1.0, 41)
        field = ChemicalField([-1.0], 0.05, nodes ** 2, Boundary.NEUMANN)
        assert chem_gradient(field, np.array([0.5]))[0] == pytest.approx(1.0, abs=0.05 ** 2)

    def test_periodic_wraps(self):
        """Test that points outside a periodic box are wrapped."""
        nodes = np.arange(16) / 16.0
        field = ChemicalField([0.0], 1.0 / 16.0, np.sin(2 * np.pi * nodes), Boundary.PERIODIC)
        np.testing.assert_allclose(chem_gradient(field, np.array([1.25])),
                                   chem_gradient(field, np.array([0.25])))

    def test_outside_closed_box(self):
        """Test that points outside a Neumann box are rejected."""
        field = ChemicalField([0.0], 0.1, np.zeros(11), Boundary.NEUMANN)
        with pytest.raises(ModelError):
            chem_gradient(field, np.array([1.5]))

    def test_non_finite_field(self):
        """Test that non-finite values are rejected."""
        with pytest.raises(NonFiniteStateError):
            ChemicalField([0.0], 0.1, np.array([0.0, np.nan, 0.0]))


class TestDiagnostics:
    """Tests for energy, momentum and velocity diameter."""

    def test_energy_of_harmonic_pair(self):
        """Test kinetic plus pair energy on two particles."""
        model = ModelSpec(ModelKind.TWO_BODY, potential=HarmonicPotential(1.0))
        ens = ensemble([0.0, 1.0], [1.0, 0.0])
        # kinetic 1/2, pair (1/4)(V(1) + V(-1)) = 1/4
        assert total_energy(model, ens) == pytest.approx(0.75)

    def test_momentum_and_diameter(self):
        """Test total momentum and the velocity diameter."""
        ens = ensemble([0.0, 1.0, 2.0], [1.0, -2.0, 0.5])
        np.testing.assert_allclose(total_momentum(ens), [-0.5])
        assert velocity_diameter(ens.velocities) == pytest.approx(3.0)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
