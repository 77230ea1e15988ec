"""Tests for corrector.py module."""

import json
from dataclasses import replace
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from dsre.corrector import (
    ConvergenceError,
    SolverOptions,
    build_cocycle,
    effective_covariance,
    local_variance,
    path_sum,
    scalar_variance_by_parts,
    solve_corrector,
    solve_corrector_dense,
    write_corrector,
)
from dsre.environment import TorusEnvironment, assemble_environment
from dsre.fields import read_field_dump
from dsre.lattice import TorusGeometry
from dsre.operator_algebra import operator_calculus_corrector


def _scalar_target(geometry: TorusGeometry, seed: int = 0) -> np.ndarray:
    phi = np.random.default_rng(seed).normal(size=geometry.shape)
    return phi - phi.mean()


class TestSolverOptions:
    """Tests for SolverOptions."""

    @pytest.mark.parametrize("tol", [0.0, -1e-8])
    def test_rejects_non_positive_tol(self, tol: float):
        """Should refuse tolerances <= 0."""
        with pytest.raises(ValueError, match="tol"):
            SolverOptions(tol=tol)

    def test_rejects_unknown_preconditioner(self):
        """Should refuse preconditioners other than fft and none."""
        with pytest.raises(ValueError, match="preconditioner"):
            SolverOptions(preconditioner="ilu")

    def test_iteration_cap(self, torus_2d: TorusGeometry):
        """Should default to 10 N^{d/2} and honour an explicit cap."""
        assert SolverOptions().iteration_cap(torus_2d) == 80
        assert SolverOptions(max_iter=7).iteration_cap(torus_2d) == 7


class TestSolveCorrector:
    """Tests for solve_corrector."""

    def test_control_has_zero_corrector(self, control_env: TorusEnvironment):
        """Should give chi = 0 and sigma2 = 2 I for the simple random walk."""
        solution = solve_corrector(control_env)
        np.testing.assert_array_equal(solution.chi, 0.0)
        np.testing.assert_allclose(solution.sigma2, 2.0 * np.eye(2), atol=1e-12)
        assert solution.residual == 0.0
        assert solution.chi.shape == (2, 8, 8)
        assert solution.theta.shape == (2, 4, 8, 8)

    def test_residual_within_tolerance(self, random_env: TorusEnvironment):
        """Should reach the requested max-norm residual."""
        opts = SolverOptions(tol=1e-10)
        solution = solve_corrector(random_env, opts=opts)
        assert solution.method == "gmres"
        assert solution.residual <= 1e-10 * np.max(np.abs(solution.phi))
        np.testing.assert_allclose(solution.chi.mean(axis=(1, 2)), 0.0, atol=1e-12)

    @pytest.mark.parametrize("preconditioner", ["fft", "none"])
    def test_matches_dense_oracle(self, random_env, preconditioner: str):
        """Should agree with the dense LU solve with or without preconditioning."""
        opts = SolverOptions(tol=1e-11, preconditioner=preconditioner)
        krylov = solve_corrector(random_env, opts=opts)
        dense = solve_corrector_dense(random_env)
        np.testing.assert_allclose(krylov.chi, dense.chi, atol=1e-8)
        np.testing.assert_allclose(krylov.sigma2, dense.sigma2, atol=1e-8)

    def test_threads_do_not_change_result(self, random_env: TorusEnvironment):
        """Should give the same corrector with one or several workers."""
        one = solve_corrector(random_env, opts=SolverOptions(threads=1))
        two = solve_corrector(random_env, opts=SolverOptions(threads=2))
        np.testing.assert_array_equal(one.chi, two.chi)

    def test_warm_start(self, random_env: TorusEnvironment):
        """Should accept a converged solution as initial guess."""
        first = solve_corrector(random_env)
        again = solve_corrector(random_env, initial_guess=first.chi)
        assert sum(again.iterations) <= sum(first.iterations)
        np.testing.assert_allclose(again.chi, first.chi, atol=1e-8)

    def test_reversible_bracket(self, conductance_env: TorusEnvironment):
        """Should lie between the harmonic and arithmetic mean bounds."""
        sigma2 = solve_corrector(conductance_env).sigma2
        for i in range(2):
            s_i = conductance_env.s_axes[i]
            lower = 2.0 / np.mean(1.0 / s_i)
            upper = 2.0 * np.mean(s_i)
            assert lower - 1e-9 <= sigma2[i, i] <= upper + 1e-9

    def test_covariance_is_symmetric_positive(self, random_env: TorusEnvironment):
        """Should return a symmetric positive definite sigma2."""
        sigma2 = solve_corrector(random_env).sigma2
        np.testing.assert_allclose(sigma2, sigma2.T)
        assert np.all(np.linalg.eigvalsh(sigma2) > 0)

    def test_dense_fallback(self, random_env: TorusEnvironment):
        """Should fall back to dense LU when GMRES stalls on a small torus."""
        n = random_env.geometry.n_sites
        stalled = (np.zeros(n), 1, 1.0)
        with patch("dsre.corrector._gmres", return_value=stalled):
            solution = solve_corrector(random_env)
        assert solution.method == "dense"
        assert solution.residual < 1e-8

    def test_convergence_error_on_large_torus(self):
        """Should raise ConvergenceError when the dense fallback is unavailable."""
        g = TorusGeometry(d=2, N=65)
        env = assemble_environment(
            {"kind": "iid_uniform", "lo": 1.0, "hi": 2.0}, None, geometry=g, seed=1
        )
        opts = SolverOptions(max_iter=1, preconditioner="none")
        with pytest.raises(ConvergenceError) as excinfo:
            solve_corrector(env, _scalar_target(g), opts)
        assert excinfo.value.residual > 0
        assert isinstance(excinfo.value, RuntimeError)


class TestScalarTargets:
    """Tests for scalar right-hand sides."""

    def test_variance_by_parts(self, random_env: TorusEnvironment):
        """Should match -2 <chi, phi> to the covariance of the increments."""
        phi = _scalar_target(random_env.geometry, 1)
        solution = solve_corrector(random_env, phi, SolverOptions(tol=1e-12))
        assert solution.sigma2 == pytest.approx(
            scalar_variance_by_parts(solution), rel=1e-8
        )

    def test_by_parts_needs_scalar_target(self, control_env: TorusEnvironment):
        """Should refuse summation by parts on the drift target."""
        with pytest.raises(ValueError, match="scalar"):
            scalar_variance_by_parts(solve_corrector(control_env))

    def test_theta_matches_operator_calculus(self, random_env: TorusEnvironment):
        """Should give the same increments as the operator-calculus corrector."""
        phi = _scalar_target(random_env.geometry, 2)
        solution = solve_corrector(random_env, phi, SolverOptions(tol=1e-12))
        calculus = operator_calculus_corrector(random_env, phi)
        np.testing.assert_allclose(
            solution.theta[0], calculus.theta.values, atol=1e-8
        )

    def test_rejects_nonzero_mean(self, control_env: TorusEnvironment):
        """Should refuse a target with nonzero mean by default."""
        with pytest.raises(ValueError, match="allow_mean"):
            solve_corrector(control_env, np.ones((8, 8)))

    def test_allow_mean_subtracts(self, random_env: TorusEnvironment):
        """Should subtract and record the mean when allowed."""
        phi = _scalar_target(random_env.geometry, 3) + 0.5
        solution = solve_corrector(random_env, phi, allow_mean=True)
        assert solution.removed_mean[0] == pytest.approx(0.5)
        np.testing.assert_allclose(solution.phi[0], phi - phi.mean())

    def test_rejects_wrong_shape(self, control_env: TorusEnvironment):
        """Should refuse targets of the wrong shape."""
        with pytest.raises(ValueError, match="shape"):
            solve_corrector(control_env, np.zeros((4, 4)))

    def test_rejects_unknown_target(self, control_env: TorusEnvironment):
        """Should refuse unknown named targets."""
        with pytest.raises(ValueError, match="Unknown"):
            solve_corrector(control_env, "velocity")


class TestCocycle:
    """Tests for the corrector cocycle."""

    def test_vanishes_at_origin(self, random_env: TorusEnvironment):
        """Should give Theta(0) = 0."""
        cocycle = solve_corrector(random_env).cocycle
        np.testing.assert_array_equal(cocycle[:, 0, 0], 0.0)

    def test_path_independence(self, random_env: TorusEnvironment):
        """Should sum theta to the same value along any path."""
        solution = solve_corrector(random_env)
        end = np.array([3, -2])
        first = path_sum(solution, end, (0, 1))
        second = path_sum(solution, end, (1, 0))
        assert first == pytest.approx(second, abs=1e-10)
        assert first == pytest.approx(solution.cocycle[0, 3, 6], abs=1e-10)

    def test_box(self, random_env: TorusEnvironment):
        """Should return Theta on the centred box with the origin in the middle."""
        solution = solve_corrector(random_env)
        box = build_cocycle(solution, 2)
        assert box.shape == (2, 5, 5)
        np.testing.assert_array_equal(box[:, 2, 2], 0.0)
        np.testing.assert_array_equal(box[:, 3, 1], solution.cocycle[:, 1, 7])

    def test_rejects_negative_radius(self, control_env: TorusEnvironment):
        """Should refuse negative box radii."""
        with pytest.raises(ValueError, match="radius"):
            build_cocycle(solve_corrector(control_env), -1)


class TestCovariances:
    """Tests for the covariance helpers."""

    def test_rejects_foreign_solution(self, control_env, random_env):
        """Should refuse a solution computed on another environment."""
        with pytest.raises(ValueError, match="different environment"):
            effective_covariance(control_env, solve_corrector(random_env))

    def test_local_variance_control(self, control_env: TorusEnvironment):
        """Should equal 2d everywhere for the simple random walk."""
        solution = solve_corrector(control_env)
        np.testing.assert_allclose(local_variance(control_env, solution), 4.0)

    def test_local_variance_averages_to_trace(self, random_env: TorusEnvironment):
        """Should average to trace(sigma2) under the p-weighting."""
        solution = solve_corrector(random_env)
        cov = effective_covariance(random_env, solution)
        average = np.mean(local_variance(random_env, solution))
        assert average == pytest.approx(np.trace(cov.p_weighted), rel=1e-10)

    def test_weightings_agree(self, random_env: TorusEnvironment):
        """Should give the same covariance under s- and p-weighting."""
        cov = effective_covariance(random_env, solve_corrector(random_env))
        np.testing.assert_allclose(cov.p_weighted, cov.sigma2, atol=1e-10)
        assert cov.weighting_defect < 1e-10

    def test_scales_with_rates(self, random_env: TorusEnvironment):
        """Should multiply sigma2 by lam when every rate is multiplied by lam."""
        lam = 2.5
        faster = assemble_environment(
            lam * random_env.s_axes, random_env.h.scaled(lam), "reject"
        )
        np.testing.assert_allclose(faster.p, lam * random_env.p, rtol=1e-12)
        sigma2 = solve_corrector(random_env).sigma2
        np.testing.assert_allclose(
            solve_corrector(faster).sigma2, lam * sigma2, rtol=1e-6
        )

    def test_rejects_inconsistent_increments(self, random_env: TorusEnvironment):
        """Should refuse increments on which the two weightings disagree."""
        solution = solve_corrector(random_env)
        noise = np.random.default_rng(0).normal(size=solution.theta.shape)
        with pytest.raises(ValueError, match="differ"):
            effective_covariance(random_env, replace(solution, theta=noise))

    def test_rejects_degenerate_covariance(self, random_env: TorusEnvironment):
        """Should refuse a drift corrector that cancels every step."""
        solution = solve_corrector(random_env)
        g = random_env.geometry
        steps = g.step_matrix.T.astype(float).reshape(g.d, g.n_directions, 1, 1)
        theta = np.broadcast_to(steps, solution.theta.shape)
        with pytest.raises(ValueError, match="not positive"):
            effective_covariance(random_env, replace(solution, theta=theta))


class TestWriteCorrector:
    """Tests for write_corrector."""

    def test_writes_fields_and_summary(self, tmp_path: Path, random_env):
        """Should dump chi and theta components and a JSON summary."""
        solution = solve_corrector(random_env)
        paths = write_corrector(solution, tmp_path / "corrector", seed=7)
        assert [p.name for p in paths] == [
            "corrector.f64",
            "corrector.json",
            "corrector_summary.json",
        ]
        dump = read_field_dump(tmp_path / "corrector")
        assert "chi_1" in dump.components
        assert "theta_2_-e1" in dump.components
        np.testing.assert_array_equal(dump.components["chi_2"], solution.chi[1])

        summary = json.loads(paths[2].read_text())
        assert summary["seed"] == 7
        assert summary["env_hash"] == random_env.env_hash
        np.testing.assert_allclose(summary["sigma2"], solution.sigma2)
