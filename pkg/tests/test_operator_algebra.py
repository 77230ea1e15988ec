"""Tests for operator_algebra.py module."""

import numpy as np
import pytest

from dsre.environment import TorusEnvironment, assemble_environment
from dsre.lattice import Direction, TorusGeometry
from dsre.operator_algebra import (
    GradientField,
    OperatorHandle,
    OperatorTag,
    ScalarField,
    apply,
    dense_matrix,
    fourier_symbol,
    harmonic_residual,
    operator_calculus_corrector,
    verify_identities,
)


def _zero_mean(geometry: TorusGeometry, seed: int) -> np.ndarray:
    f = np.random.default_rng(seed).normal(size=geometry.shape)
    return f - f.mean()


class TestOperatorHandle:
    """Tests for OperatorHandle construction."""

    @pytest.mark.parametrize(
        "tag",
        [OperatorTag.SHIFT, OperatorTag.GRAD, OperatorTag.GAMMA, OperatorTag.MMUL],
    )
    def test_directed_operators_need_direction(self, tag: OperatorTag):
        """Should refuse directed operators without a direction."""
        with pytest.raises(ValueError, match="direction"):
            OperatorHandle(tag)

    def test_power_needs_alpha(self):
        """Should refuse |Lap|^alpha without an exponent."""
        with pytest.raises(ValueError, match="alpha"):
            OperatorHandle(OperatorTag.ABS_LAP_POW)

    def test_str(self):
        """Should render the tag with its direction or exponent."""
        assert str(OperatorHandle(OperatorTag.GRAD, Direction(1, -1))) == "grad(-e1)"
        power = OperatorHandle(OperatorTag.ABS_LAP_POW, alpha=0.5)
        assert str(power) == "abs_lap_pow(0.5)"
        assert str(OperatorHandle(OperatorTag.LAP)) == "lap"


class TestScalarField:
    """Tests for ScalarField."""

    def test_centered(self, torus_2d: TorusGeometry):
        """Should subtract the torus mean and flag the field."""
        field = ScalarField.centered(torus_2d, np.arange(64.0).reshape(8, 8))
        assert field.zero_mean
        assert abs(field.values.mean()) < 1e-12

    def test_rejects_false_zero_mean_flag(self, torus_2d: TorusGeometry):
        """Should refuse a zero-mean flag on a field with nonzero mean."""
        with pytest.raises(ValueError, match="zero-mean"):
            ScalarField(torus_2d, np.ones((8, 8)), zero_mean=True)


class TestApply:
    """Tests for apply and the Fourier symbols."""

    def test_laplacian_of_delta(self, torus_2d: TorusGeometry):
        """Should give -8 at the origin and 2 at each neighbour in d = 2."""
        delta = np.zeros(torus_2d.shape)
        delta[0, 0] = 1.0
        lap = apply(OperatorHandle(OperatorTag.LAP), delta).values
        assert lap[0, 0] == -8.0
        for x in [(1, 0), (7, 0), (0, 1), (0, 7)]:
            assert lap[x] == 2.0
        assert lap.sum() == pytest.approx(0.0)

    def test_laplacian_symbol(self, torus_2d: TorusGeometry):
        """Should vanish at p = 0 and equal -16 at p = (pi, pi)."""
        symbol = fourier_symbol(OperatorHandle(OperatorTag.LAP), torus_2d)
        assert symbol[0, 0] == 0
        assert symbol[4, 4].real == pytest.approx(-16.0)

    def test_stencil_matches_symbol(self, torus_2d: TorusGeometry):
        """Should agree between the stencil and the Fourier realization of Lap."""
        f = _zero_mean(torus_2d, 0)
        stencil = apply(OperatorHandle(OperatorTag.LAP), f).values
        power = apply(OperatorHandle(OperatorTag.ABS_LAP_POW, alpha=1.0), f).values
        np.testing.assert_allclose(stencil, -power, atol=1e-12)

    def test_sum_of_riesz_transforms(self, torus_2d: TorusGeometry):
        """Should give sum_k Gamma_k = -1/2 |Lap|^{1/2}."""
        f = ScalarField.centered(torus_2d, _zero_mean(torus_2d, 1))
        gamma = apply(OperatorHandle(OperatorTag.GAMMA_FULL), f).values.sum(axis=0)
        half = apply(OperatorHandle(OperatorTag.ABS_LAP_POW, alpha=0.5), f).values
        np.testing.assert_allclose(gamma, -0.5 * half, atol=1e-12)

    def test_gamma_is_isometry(self, torus_2d: TorusGeometry):
        """Should give Gamma* Gamma f = f on zero-mean fields."""
        f = ScalarField.centered(torus_2d, _zero_mean(torus_2d, 2))
        grad = apply(OperatorHandle(OperatorTag.GAMMA_FULL), f)
        assert isinstance(grad, GradientField)
        back = apply(OperatorHandle(OperatorTag.GAMMA_ADJ), grad).values
        np.testing.assert_allclose(back, f.values, atol=1e-12)

    def test_gradient_is_a_gradient(self, torus_2d: TorusGeometry):
        """Should produce antisymmetric, curl-free gradient fields."""
        f = ScalarField(torus_2d, np.random.default_rng(3).normal(size=(8, 8)))
        grad = apply(OperatorHandle(OperatorTag.GRAD_FULL), f)
        assert grad.antisymmetry_defect() < 1e-14
        assert grad.curl_defect() < 1e-12

    def test_gamma_needs_zero_mean(self, torus_2d: TorusGeometry):
        """Should refuse Gamma on fields with nonzero mean."""
        with pytest.raises(ValueError, match="zero-mean"):
            apply(OperatorHandle(OperatorTag.GAMMA, Direction(1, 1)), np.ones((8, 8)))

    def test_negative_power_needs_zero_mean(self, torus_2d: TorusGeometry):
        """Should refuse |Lap|^{-1/2} on fields with nonzero mean."""
        with pytest.raises(ValueError, match="zero-mean"):
            apply(OperatorHandle(OperatorTag.ABS_LAP_POW, alpha=-0.5), np.ones((8, 8)))

    def test_adjoint_needs_gradient_field(self, torus_2d: TorusGeometry):
        """Should refuse adjoints on scalar fields."""
        with pytest.raises(ValueError, match="gradient fields"):
            apply(OperatorHandle(OperatorTag.GRAD_ADJ), _zero_mean(torus_2d, 4))

    def test_environment_operators_need_binding(self, torus_2d: TorusGeometry):
        """Should refuse T, A, S, L without an environment."""
        with pytest.raises(ValueError, match="bound"):
            apply(OperatorHandle(OperatorTag.L), _zero_mean(torus_2d, 5))

    def test_generator_split(self, random_env: TorusEnvironment):
        """Should give L = 1/2 Lap - T + A."""
        f = _zero_mean(random_env.geometry, 6)

        def op(tag: OperatorTag) -> np.ndarray:
            return apply(OperatorHandle(tag, env=random_env), f).values

        split = 0.5 * op(OperatorTag.LAP) - op(OperatorTag.T) + op(OperatorTag.A)
        np.testing.assert_allclose(op(OperatorTag.L), split, atol=1e-12)

    def test_not_fourier_diagonal(self, torus_2d: TorusGeometry):
        """Should refuse symbols for stencil operators."""
        with pytest.raises(ValueError, match="Fourier"):
            fourier_symbol(OperatorHandle(OperatorTag.T), torus_2d)


class TestDenseMatrix:
    """Tests for dense realizations."""

    def test_power_matrices(self):
        """Should square |Lap|^{1/2} into |Lap| = -Lap."""
        g = TorusGeometry(d=2, N=4)
        half = dense_matrix(OperatorHandle(OperatorTag.ABS_LAP_POW, alpha=0.5), g)
        lap = dense_matrix(OperatorHandle(OperatorTag.LAP), g)
        np.testing.assert_allclose(half @ half, -lap, atol=1e-10)

    def test_matches_apply(self, random_env: TorusEnvironment):
        """Should act like apply on flat fields."""
        f = _zero_mean(random_env.geometry, 7)
        for tag in (OperatorTag.L, OperatorTag.S):
            handle = OperatorHandle(tag, env=random_env)
            np.testing.assert_allclose(
                dense_matrix(handle) @ f.ravel(),
                apply(handle, f).values.ravel(),
                atol=1e-12,
            )

    def test_refuses_large_geometry(self):
        """Should refuse tori above the dense limit."""
        with pytest.raises(ValueError, match="Dense mode"):
            dense_matrix(OperatorHandle(OperatorTag.LAP), TorusGeometry(d=2, N=65))


class TestVerifyIdentities:
    """Tests for verify_identities."""

    @pytest.mark.parametrize("env_name", ["control_env", "skew_env", "random_env"])
    def test_identities_hold(self, env_name: str, request: pytest.FixtureRequest):
        """Should pass every identity, including C skew in dense mode."""
        env = request.getfixturevalue(env_name)
        report = verify_identities(env, trials=5, tol=1e-9)
        assert report.passed, report.failures
        assert "C_skew" in report.defects

    def test_matrix_free_mode(self, random_env: TorusEnvironment):
        """Should skip the dense check when asked."""
        report = verify_identities(random_env, trials=2, dense=False)
        assert "C_skew" not in report.defects

    def test_dense_mode_limit(self):
        """Should refuse dense mode above the site limit."""
        env = assemble_environment(
            {"kind": "constant", "value": 1.0}, None, geometry=TorusGeometry(d=2, N=65)
        )
        with pytest.raises(ValueError, match="too large"):
            verify_identities(env, trials=1, dense=True)


class TestOperatorCalculusCorrector:
    """Tests for operator_calculus_corrector."""

    def test_control_closed_form(self, control_env: TorusEnvironment):
        """Should give chi = -2 |Lap|^{-1/2} phi for the simple random walk."""
        g = control_env.geometry
        phi = _zero_mean(g, 8)
        result = operator_calculus_corrector(control_env, phi)
        expected = -2.0 * apply(
            OperatorHandle(OperatorTag.ABS_LAP_POW, alpha=-0.5), phi
        ).values
        np.testing.assert_allclose(result.chi.values, expected, atol=1e-10)
        assert result.residual < 1e-10

    def test_modes_agree_for_constant_conductance(self, skew_env: TorusEnvironment):
        """Should give the same chi in general and simplified mode."""
        phi = _zero_mean(skew_env.geometry, 9)
        general = operator_calculus_corrector(skew_env, phi, "general")
        simplified = operator_calculus_corrector(skew_env, phi, "simplified")
        np.testing.assert_allclose(
            general.chi.values, simplified.chi.values, atol=1e-9
        )
        assert general.residual < 1e-9
        assert simplified.residual < 1e-9

    def test_general_mode_random_conductances(self, random_env: TorusEnvironment):
        """Should solve the harmonic equation for random conductances."""
        phi = _zero_mean(random_env.geometry, 10)
        result = operator_calculus_corrector(random_env, phi)
        assert result.residual < 1e-9
        assert harmonic_residual(random_env, result.chi.values, phi) < 1e-9
        assert result.theta.antisymmetry_defect() < 1e-12

    def test_simplified_mode_needs_constant_conductance(self, random_env):
        """Should refuse simplified mode with random conductances."""
        phi = _zero_mean(random_env.geometry, 11)
        with pytest.raises(ValueError, match="constant conductances"):
            operator_calculus_corrector(random_env, phi, "simplified")

    def test_rejects_nonzero_mean(self, control_env: TorusEnvironment):
        """Should refuse phi with a nonzero torus mean."""
        with pytest.raises(ValueError, match="zero-mean"):
            operator_calculus_corrector(control_env, np.ones((8, 8)))

    def test_rejects_unknown_mode(self, control_env: TorusEnvironment):
        """Should refuse unknown modes."""
        with pytest.raises(ValueError, match="Unknown"):
            phi = _zero_mean(control_env.geometry, 0)
            operator_calculus_corrector(control_env, phi, "x")
