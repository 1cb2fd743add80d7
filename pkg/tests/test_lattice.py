import numpy as np
import pytest

from greenlab.lattice import (Annulus, DomainError, annulus_sites, ball_mask, build_domain, dyadic_annuli,
                              line_domain)


def test_box_interior_and_ranks():
    dom = build_domain({"d": 2, "extents": [5, 5]})
    assert dom.n_interior == 9
    idx = dom.unknown_index()
    assert idx[1, 1] == 0 and idx[3, 3] == 8 and idx[0, 2] == -1
    assert dom.center == (2, 2)
    assert dom.is_interior((2, 2)) and not dom.is_interior((0, 3)) and not dom.is_interior((9, 9))


def test_strip_keeps_long_axis_open():
    dom = build_domain({"d": 2, "extents": [9, 129], "shape": "strip", "bounded_axis": 0})
    assert dom.n_interior == 7 * 127
    assert not dom.interior_mask[0].any() and dom.interior_mask[1:8, 1].all()


def test_torus_has_no_boundary_and_wraps():
    dom = build_domain({"d": 2, "extents": [4, 4], "shape": "torus"})
    assert dom.n_interior == 16 and dom.periodic
    assert dom.distance((0, 0))[3, 0] == 1.0


@pytest.mark.parametrize("spec", [
    {"d": 4, "extents": [3, 3, 3, 3]},
    {"d": 2, "extents": [3]},
    {"d": 2, "extents": [2, 5]},
    {"d": 2, "extents": [5, 5], "shape": "disk"},
    {"d": 2, "extents": [5, 5], "shape": "strip"},
    {"d": 2, "extents": [5, 5], "spacing": 0.5},
    {"d": 2, "extents": [5, 5], "shape": "torus", "dirichlet": True},
])
def test_invalid_specs_rejected(spec):
    with pytest.raises(DomainError):
        build_domain(spec)


def test_line_domain():
    dom = line_domain(3)
    assert dom.extents == (5,) and dom.n_interior == 3 and dom.center == (2,)
    with pytest.raises(DomainError):
        line_domain(3, d=2)


def test_dyadic_annuli_and_sites():
    shells = dyadic_annuli((8, 8), 1, 3)
    assert [(a.r_in, a.r_out) for a in shells] == [(1, 2), (2, 4), (4, 8)]
    dom = build_domain({"d": 2, "extents": [17, 17]})
    # |x| in [1, 2): the 4 axis neighbours and the 4 diagonals
    assert len(annulus_sites(dom, shells[0])) == 8
    with pytest.raises(ValueError):
        Annulus((0, 0), 2, 1)
    with pytest.raises(ValueError):
        annulus_sites(dom, Annulus((40, 0), 1, 2))


def test_ball_mask_counts():
    dom = build_domain({"d": 3, "extents": [9, 9, 9]})
    assert ball_mask(dom, dom.center, 1).sum() == 1
    assert ball_mask(dom, dom.center, 1.1).sum() == 7
    assert ball_mask(dom, dom.center, 1.5).sum() == 19
    assert ball_mask(dom, (1, 1, 1), 1.1).sum() == 4
    assert ball_mask(dom, (1, 1, 1), 1.1, interior_only=False).sum() == 7


def test_offsets_are_site_minus_center():
    dom = build_domain({"d": 2, "extents": [6, 7]})
    off = dom.offsets((2, 3))
    assert off.shape == (6, 7, 2)
    assert np.array_equal(off[5, 0], [3, -3])
