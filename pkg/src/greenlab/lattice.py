"""Lattice domains, site indexing and dyadic annulus geometry."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

SHAPES = ("box", "strip", "torus")


class DomainError(ValueError):
    """Raised for an inconsistent domain request."""


@dataclass(frozen=True, eq=False)
class LatticeDomain:
    """A finite piece of Z^d with a Dirichlet mask.

    Sites carry integer coordinates ``0 <= x_i < extents[i]``.  On ``box`` and
    ``strip`` domains the outer layer of every Dirichlet axis is boundary (the
    Green function vanishes there); the remaining sites are unknowns.  A
    ``torus`` wraps every axis and has no boundary.
    """

    d: int
    extents: tuple[int, ...]
    shape: str = "box"
    spacing: float = 1.0
    bounded_axis: int | None = None
    dirichlet_axes: tuple[int, ...] = ()
    interior_mask: np.ndarray = field(repr=False, default=None)

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.extents))

    @property
    def n_interior(self) -> int:
        return int(self.interior_mask.sum())

    @property
    def periodic(self) -> bool:
        return self.shape == "torus"

    @property
    def center(self) -> tuple[int, ...]:
        return tuple(n // 2 for n in self.extents)

    def spec(self) -> dict:
        out = {"d": self.d, "extents": list(self.extents), "shape": self.shape,
               "spacing": self.spacing}
        if self.bounded_axis is not None:
            out["bounded_axis"] = self.bounded_axis
        if self.shape != "torus":
            out["dirichlet_axes"] = list(self.dirichlet_axes)
        return out

    def is_interior(self, site) -> bool:
        site = tuple(int(s) for s in site)
        if len(site) != self.d or any(not 0 <= s < n for s, n in zip(site, self.extents)):
            return False
        return bool(self.interior_mask[site])

    def interior_sites(self) -> np.ndarray:
        """Interior coordinates in lexicographic order, shape (n_interior, d)."""
        return np.argwhere(self.interior_mask)

    def unknown_index(self) -> np.ndarray:
        """Site array holding the rank of each interior site, -1 elsewhere."""
        idx = np.full(self.extents, -1, dtype=np.int64)
        idx[self.interior_mask] = np.arange(self.n_interior)
        return idx

    def offsets(self, center) -> np.ndarray:
        """Per-site displacement from ``center``, shape (*extents, d).

        On a torus the minimal periodic image is used.
        """
        grids = np.indices(self.extents)
        disp = np.moveaxis(grids, 0, -1) - np.asarray(center)
        if self.periodic:
            ext = np.asarray(self.extents)
            disp = (disp + ext // 2) % ext - ext // 2
        return disp

    def distance(self, center) -> np.ndarray:
        return np.sqrt((self.offsets(center) ** 2).sum(-1))


def _mask_for(d, extents, shape, dirichlet_axes):
    mask = np.ones(extents, dtype=bool)
    if shape == "torus":
        return mask
    for ax in dirichlet_axes:
        sl = [slice(None)] * d
        sl[ax] = 0
        mask[tuple(sl)] = False
        sl[ax] = extents[ax] - 1
        mask[tuple(sl)] = False
    return mask


def _check_boundary_contact(mask: np.ndarray) -> None:
    # every boundary site must touch an interior site (Moore neighbourhood)
    d = mask.ndim
    padded = np.pad(mask, 1)
    touch = np.zeros_like(mask)
    for off in itertools.product((-1, 0, 1), repeat=d):
        if not any(off):
            continue
        sl = tuple(slice(1 + o, 1 + o + n) for o, n in zip(off, mask.shape))
        touch |= padded[sl]
    bad = ~mask & ~touch
    if bad.any():
        raise DomainError(f"boundary site {tuple(np.argwhere(bad)[0])} has no interior neighbour")


def build_domain(spec: dict) -> LatticeDomain:
    """Build a domain from ``{d, extents, shape, spacing, ...}``.

    ``strip`` needs ``bounded_axis``.  Dirichlet faces default to every axis of
    a box or strip; pass ``dirichlet_axes`` to restrict them (the remaining
    faces then carry the natural boundary condition).  A torus rejects any
    Dirichlet request.
    """
    d = int(spec.get("d", 0))
    if d not in (2, 3):
        raise DomainError(f"d must be 2 or 3, got {d}")
    extents = tuple(int(n) for n in spec["extents"])
    if len(extents) != d:
        raise DomainError(f"extents {extents} do not match d={d}")
    if any(n < 3 for n in extents):
        raise DomainError(f"extents must be >= 3, got {extents}")
    shape = spec.get("shape", "box")
    if shape not in SHAPES:
        raise DomainError(f"unknown shape {shape!r}")
    spacing = float(spec.get("spacing", 1.0))
    if spacing != 1.0:
        raise DomainError("assembly uses unit lattice spacing only")

    bounded_axis = spec.get("bounded_axis")
    if shape == "strip":
        if bounded_axis is None:
            raise DomainError("strip requires bounded_axis")
        bounded_axis = int(bounded_axis)
        if not 0 <= bounded_axis < d:
            raise DomainError(f"bounded_axis {bounded_axis} out of range")
    elif bounded_axis is not None:
        raise DomainError("bounded_axis is only meaningful for strips")

    requested = spec.get("dirichlet_axes")
    if shape == "torus":
        if requested or spec.get("dirichlet"):
            raise DomainError("a torus has no Dirichlet boundary")
        dirichlet_axes: tuple[int, ...] = ()
    else:
        dirichlet_axes = tuple(range(d)) if requested is None else tuple(sorted(int(a) for a in requested))
        if shape == "strip" and bounded_axis not in dirichlet_axes:
            raise DomainError("the bounded axis of a strip must carry Dirichlet faces")
        if not dirichlet_axes:
            raise DomainError("a box needs at least one Dirichlet axis")

    mask = _mask_for(d, extents, shape, dirichlet_axes)
    if not mask.any():
        raise DomainError("domain has no interior sites")
    _check_boundary_contact(mask)
    mask.setflags(write=False)
    return LatticeDomain(d=d, extents=extents, shape=shape, spacing=spacing,
                         bounded_axis=bounded_axis, dirichlet_axes=dirichlet_axes,
                         interior_mask=mask)


def line_domain(n_interior: int, d: int = 1) -> LatticeDomain:
    """A one-dimensional Dirichlet segment with ``n_interior`` unknowns.

    Used for hand-checkable oracle slices; production experiments go through
    :func:`build_domain`.
    """
    if d != 1:
        raise DomainError("line_domain builds d=1 segments only")
    extents = (n_interior + 2,)
    mask = _mask_for(1, extents, "box", (0,))
    mask.setflags(write=False)
    return LatticeDomain(d=1, extents=extents, shape="box", dirichlet_axes=(0,),
                         interior_mask=mask)


@dataclass(frozen=True)
class Annulus:
    """Half-open Euclidean shell ``r_in <= |x - center| < r_out``."""

    center: tuple[int, ...]
    r_in: float
    r_out: float

    def __post_init__(self):
        if self.r_in < 0 or self.r_out <= self.r_in:
            raise ValueError(f"invalid shell [{self.r_in}, {self.r_out})")

    def contains(self, dist: np.ndarray) -> np.ndarray:
        return (dist >= self.r_in) & (dist < self.r_out)


def dyadic_annuli(center, r0: float, k: int) -> list[Annulus]:
    """Shells ``[r0 2^j, r0 2^(j+1))`` for ``j = 0..k-1``."""
    if r0 < 1 or k < 1:
        raise ValueError("need r0 >= 1 and k >= 1")
    center = tuple(int(c) for c in np.atleast_1d(center))
    return [Annulus(center, r0 * 2.0**j, r0 * 2.0 ** (j + 1)) for j in range(k)]


def annulus_mask(domain: LatticeDomain, annulus: Annulus) -> np.ndarray:
    return annulus.contains(domain.distance(annulus.center)) & domain.interior_mask


def annulus_sites(domain: LatticeDomain, annulus: Annulus) -> np.ndarray:
    """Interior sites of the shell, lexicographic, shape (k, d)."""
    center = annulus.center
    if len(center) != domain.d:
        raise ValueError("annulus center dimension does not match the domain")
    if any(not 0 <= c < n for c, n in zip(center, domain.extents)):
        raise ValueError(f"center {center} outside the domain bounding box")
    return np.argwhere(annulus_mask(domain, annulus))


def ball_mask(domain: LatticeDomain, center, radius: float, interior_only: bool = True) -> np.ndarray:
    """Sites with ``|x - center| < radius``."""
    m = domain.distance(center) < radius
    return m & domain.interior_mask if interior_only else m
