import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from greenlab import coeff
from greenlab.coeff import (CoefficientError, CoefficientField, as_matrix, de_giorgi_field, de_giorgi_gamma,
                            de_giorgi_norm, de_giorgi_solution, de_giorgi_tensor, elasticity_field,
                            identity_field, sample_marks, sample_two_phase, scalar_two_phase,
                            validate_tensor_axioms)
from greenlab.lattice import build_domain


def test_identity_field_axioms(box9):
    f = identity_field(box9, m=2)
    assert f.tensors.shape == (9, 9, 2, 2, 2, 2)
    rep = validate_tensor_axioms(f)
    assert rep.passed
    assert rep["bdd"].value == pytest.approx(1.0)
    assert len(rep.lines()) == 3


def test_shape_mismatch_rejected(box9):
    with pytest.raises(CoefficientError):
        CoefficientField(box9, np.zeros((8, 9, 2, 1, 2, 1)))
    with pytest.raises(CoefficientError):
        CoefficientField(box9, np.zeros((9, 9, 2, 1, 3, 1)))


def test_elasticity_normalized_and_kc_only(box9):
    f = elasticity_field(0.5, 0.0, box9)
    assert f.m == 2 and f.ellipticity_kind == "KC-only"
    assert f.lambda_claimed == pytest.approx(0.5)
    mat = as_matrix(f.tensors[4, 4])
    ev = np.linalg.eigvalsh(mat)
    # antisymmetric gradients are in the kernel pointwise
    assert ev[0] == pytest.approx(0.0, abs=1e-14) and ev[-1] == pytest.approx(1.0)
    rep = validate_tensor_axioms(f)
    assert rep.passed and "KC-only" in rep["StE"].note
    with pytest.raises(CoefficientError):
        elasticity_field(-1.0, 0.0, box9)


def test_de_giorgi_constants():
    g = de_giorgi_gamma(3)
    assert 1 < g < 1.5
    assert g == pytest.approx(1.5 * (1 - 1 / np.sqrt(17)), rel=1e-15)
    assert de_giorgi_norm(3) == 19


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.lists(st.floats(-2, 2), min_size=9, max_size=9))
def test_de_giorgi_quadratic_form(x, xi):
    x = np.asarray(x)
    xhat = x / np.linalg.norm(x)
    xi = np.asarray(xi).reshape(3, 3)  # xi[i, alpha] = d_i u_alpha
    t = de_giorgi_tensor(xhat)
    lhs = np.einsum("ia,iajb,jb", xi, t, xi)
    div_like = (3 - 2) * np.trace(xi) + 3 * xhat @ xi @ xhat
    assert lhs == pytest.approx((xi**2).sum() + div_like**2, rel=1e-10, abs=1e-10)


def test_de_giorgi_field_normalization():
    dom = build_domain({"d": 3, "extents": [9, 9, 9]})
    f = de_giorgi_field(dom)
    rep = validate_tensor_axioms(f)
    assert rep.passed
    assert rep["bdd"].value == pytest.approx(1.0, abs=1e-12)
    assert f.lambda_claimed == pytest.approx(1 / 19)
    u, sing = de_giorgi_solution(dom)
    assert sing.sum() == 1 and np.isnan(u[4, 4, 4]).all()
    r = dom.distance(dom.center)[6, 4, 4]
    assert np.linalg.norm(u[6, 4, 4]) == pytest.approx(r ** (1 - de_giorgi_gamma(3)))


def test_two_phase_sampling_is_pure(box9):
    spec = scalar_two_phase(0.25, 1.0, 0.5, 2024, 2)
    a = sample_two_phase(spec, 3, box9)
    b = sample_two_phase(spec, 3, box9)
    c = sample_two_phase(spec, 4, box9)
    assert np.array_equal(a.tensors, b.tensors)
    assert not np.array_equal(a.tensors, c.tensors)
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()
    assert spec.lam == 0.25 and spec.b_norm == pytest.approx(0.75)
    assert validate_tensor_axioms(a).passed


def test_extreme_probabilities(box9):
    lo = sample_marks(scalar_two_phase(0.25, 1.0, 0.0, 1, 2), 0, box9.extents)
    hi = sample_marks(scalar_two_phase(0.25, 1.0, 1.0, 1, 2), 0, box9.extents)
    assert not lo.any() and hi.all()


def test_iid_marks_frequency():
    marks = sample_marks(scalar_two_phase(0.25, 1.0, 0.3, 7, 2), 0, (200, 200))
    assert abs(marks.mean() - 0.3) < 0.01


def test_checkerboard_blocks_constant():
    spec = scalar_two_phase(0.25, 1.0, 0.5, 9, 2, kind="checkerboard-random")
    marks = sample_marks(spec, 0, (20, 20))
    # every 2x2 block of the shifted tiling is constant, so each row pair changes at most every 2 sites
    changes = (marks[:, 1:] != marks[:, :-1]).sum(1)
    assert changes.max() <= 10
    with pytest.raises(CoefficientError):
        scalar_two_phase(0.25, 1.0, 0.5, 9, 2, kind="poisson")


def test_invalid_phase_rejected():
    with pytest.raises(CoefficientError):
        scalar_two_phase(0.25, 1.5, 0.5, 0, 2)
    with pytest.raises(CoefficientError):
        scalar_two_phase(0.25, 1.0, 1.5, 0, 2)


def test_asymmetric_tensor_witness(box9):
    f = identity_field(box9)
    t = f.tensors.copy()
    t[3, 5, 0, 0, 1, 0] = 0.1
    rep = validate_tensor_axioms(CoefficientField(box9, t))
    assert not rep["Sym"].passed and rep["Sym"].witness == (3, 5)
    assert rep["Sym"].value == pytest.approx(0.1)


def test_flat_binary_roundtrip(tmp_path, two_phase_11):
    path = tmp_path / "field.bin"
    coeff.export_field(two_phase_11, path)
    raw = path.read_bytes()
    assert raw[:4] == b"GLAB"
    back = coeff.load_field_tensors(path)
    assert np.array_equal(back, two_phase_11.tensors)
    with pytest.raises(ValueError):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"XXXX" + raw[4:])
        coeff.read_flat_binary(bad)
