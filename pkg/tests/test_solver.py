import numpy as np
import pytest

from greenlab.coeff import identity_field
from greenlab.lattice import build_domain
from greenlab.operator import assemble_div_form
from greenlab.solver import SolverConfig, SolverError, cg_solve, dense_oracle_solve


@pytest.mark.parametrize("kw", [{"rel_tol": 0.0}, {"rel_tol": 1e-3}, {"max_iter": 0}, {"preconditioner": "ilu"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


def test_default_cap():
    assert SolverConfig().iteration_cap(10) == 200
    assert SolverConfig(max_iter=7).iteration_cap(10) == 7


def test_cg_matches_dense(two_phase_11, rng):
    op = assemble_div_form(two_phase_11)
    b = rng.standard_normal(op.N)
    res = cg_solve(op, b)
    ref = dense_oracle_solve(op, b)
    assert res.converged and res.final_residual <= 1e-10
    assert np.linalg.norm(res.solution - ref) <= 1e-9 * np.linalg.norm(ref)


def test_unpreconditioned_and_zero_rhs(identity_5):
    op = assemble_div_form(identity_5)
    out = cg_solve(op, np.zeros(op.N))
    assert out.converged and out.iterations == 0 and not out.solution.any()
    b = np.ones(op.N)
    plain = cg_solve(op, b, SolverConfig(preconditioner="none"))
    assert plain.converged
    assert np.allclose(op.matrix @ plain.solution, b, atol=1e-9)


def test_iteration_cap_reports_unconverged():
    op = assemble_div_form(identity_field(build_domain({"d": 2, "extents": [30, 30]})))
    out = cg_solve(op, np.ones(op.N), SolverConfig(max_iter=3))
    assert not out.converged and out.iterations == 3 and out.final_residual > 1e-10


def test_non_spd_diagonal_rejected():
    with pytest.raises(SolverError):
        cg_solve(np.array([[-1.0, 0], [0, 1.0]]), np.ones(2))


def test_dense_oracle_size_cap():
    op = assemble_div_form(identity_field(build_domain({"d": 2, "extents": [67, 67]})))
    with pytest.raises(SolverError):
        dense_oracle_solve(op, np.ones(op.N))
