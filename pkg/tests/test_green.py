import json

import numpy as np
import pytest

from greenlab.coeff import elasticity_field, identity_field, sample_two_phase, scalar_two_phase
from greenlab.green import (GreenSolver, SolverFailure, check_representation, check_symmetry, export_bundle,
                            frob, grad_x, green_bundle, regularization_sweep, regularized_green,
                            weak_form_defect)
from greenlab.lattice import build_domain, line_domain
from greenlab.solver import SolverConfig

# G of the identity field on the 3x3-interior box, pole at the centre
GOLDEN_3x3 = np.array([[0.0625, 0.125, 0.0625], [0.125, 0.375, 0.125], [0.0625, 0.125, 0.0625]])


@pytest.mark.parametrize("method", ["cg", "dense"])
def test_golden_box(identity_5, method):
    b = green_bundle(identity_5, method=method)
    assert b.values.shape == (5, 5, 1, 1)
    assert np.allclose(b.values[1:4, 1:4, 0, 0], GOLDEN_3x3, atol=1e-12)
    assert b.values[0].max() == 0 and b.sup_norm() == pytest.approx(0.375)


def test_golden_line():
    f = identity_field(line_domain(3))
    b = green_bundle(f)
    assert np.allclose(b.values[:, 0, 0], [0, 0.5, 1.0, 0.5, 0], atol=1e-12)


def test_bundle_metadata_and_cache(two_phase_11):
    s = GreenSolver(two_phase_11)
    b = s.bundle((5, 5))
    assert s.bundle((5, 5)) is b and len(s.log) == 1
    assert b.field_hash == two_phase_11.fingerprint() and b.kind == "G" and b.rel_tol == 1e-10
    assert b.residuals[0] <= 1e-10
    s.clear()
    assert s.bundle((5, 5)) is not b
    with pytest.raises(ValueError):
        s.bundle((0, 5))


def test_unconverged_solve_raises(two_phase_11):
    s = GreenSolver(two_phase_11, SolverConfig(max_iter=2))
    with pytest.raises(SolverFailure) as exc:
        s.bundle((5, 5))
    assert exc.value.source == ("G", (5, 5))


def test_grad_y_is_difference_of_bundles(two_phase_11):
    s = GreenSolver(two_phase_11)
    y = (4, 6)
    for j in range(2):
        yp = list(y)
        yp[j] += 1
        dy = s.grad_y_bundle(y, j).values
        assert np.allclose(dy, s.bundle(yp).values - s.bundle(y).values, atol=1e-9)
    mixed = s.mixed(y)
    assert mixed.shape == (11, 11, 2, 2, 1, 1)
    assert np.allclose(mixed[..., 1, :, :], grad_x(s.grad_y_bundle(y, 1)))
    with pytest.raises(ValueError):
        s.grad_y_bundle((9, 5), 0)


def test_weak_form_defect(two_phase_11, rng):
    b = green_bundle(two_phase_11, y=(5, 5))
    zeta = np.zeros((11, 11, 1))
    zeta[1:-1, 1:-1, 0] = rng.standard_normal((9, 9))
    assert np.abs(weak_form_defect(b, two_phase_11, zeta)).max() < 1e-9


@pytest.mark.parametrize("seed", [1, 2])
def test_symmetry_two_phase(seed):
    dom = build_domain({"d": 2, "extents": [9, 9]})
    f = sample_two_phase(scalar_two_phase(0.25, 1.0, 0.5, seed, 2), 0, dom)
    dft = check_symmetry(f, None, (2, 3), (6, 5))
    assert dft.within(10 * 1e-10)


def test_symmetry_system_transposes():
    dom = build_domain({"d": 2, "extents": [9, 9]})
    f = elasticity_field(0.5, 0.3, dom)
    dft = check_symmetry(f, None, (2, 3), (6, 5))
    assert dft.within(1e-9) and dft.scale > 0


def test_representation_off_support(two_phase_11, rng):
    f = np.zeros((11, 11, 1))
    g = np.zeros((11, 11, 2, 1))
    f[4:6, 4:6, 0] = rng.standard_normal((2, 2))
    g[4:6, 4:6, :, 0] = rng.standard_normal((2, 2, 2))
    rc = check_representation(two_phase_11, None, f, g)
    assert rc.n_points > 50 and rc.within(10 * 1e-10)


def test_representation_rejects_boundary_support(two_phase_11):
    f = np.zeros((11, 11, 1))
    f[1, 5, 0] = 1.0
    with pytest.raises(ValueError):
        check_representation(two_phase_11, None, f, None)


def test_regularized_green_converges(identity_5):
    g0 = green_bundle(identity_5).values
    g1 = regularized_green(identity_5, None, (2, 2), 1e-6).values
    assert np.abs(g1 - g0).max() < 1e-5
    with pytest.raises(ValueError):
        regularized_green(identity_5, None, (2, 2), -1.0)


def test_regularization_sweep_descending_eps():
    f = identity_field(build_domain({"d": 2, "extents": [13, 13]}))
    out = regularization_sweep(f, None, (6, 6), [1e-1, 1e-2, 1e-3])
    assert out.strictly_decreasing and out.monotone and not out.findings
    with pytest.raises(ValueError):
        regularization_sweep(f, None, (6, 6), [1e-3, 1e-1])


def test_frob():
    a = np.ones((2, 3, 2, 2))
    assert np.allclose(frob(a, 2), 2.0)


def test_export_bundle(tmp_path, identity_5):
    b = green_bundle(identity_5)
    side = export_bundle(b, tmp_path / "g.bin")
    hdr = json.loads(side.read_text())
    assert hdr["y"] == [2, 2] and hdr["field_hash"] == identity_5.fingerprint()
    assert (tmp_path / "g.bin").read_bytes()[:4] == b"GLAB"
