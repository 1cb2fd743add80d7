"""Discrete divergence-form operators, the hyper-elliptic regularizer and coercivity checks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coeff import CoefficientField
from .lattice import LatticeDomain


class OperatorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DivFormOperator:
    """Sparse symmetric matrix on the interior unknowns.

    Unknown ``k = rank(x) * m + alpha`` where ``rank`` orders interior sites
    lexicographically.
    """

    matrix: sp.csr_matrix = field(repr=False)
    domain: LatticeDomain
    m: int
    field: CoefficientField | None = field(default=None, repr=False)
    eps: float = 0.0
    n: int | None = None
    kind: str = "div-form"

    @property
    def N(self) -> int:
        return self.matrix.shape[0]

    def matvec(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ u

    def form(self, u: np.ndarray, v: np.ndarray) -> float:
        """Bilinear form ``B(u, v) = u . A v``."""
        return float(np.dot(u, self.matrix @ v))

    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def dump_coordinates(self, path) -> None:
        """Write ``row col value`` lines, rows ascending, columns sorted."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with Path(path).open("w") as fh:
            for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
                fh.write(f"{r} {c} {v:.17g}\n")


def _axis_shift(domain: LatticeDomain, axis: int):
    """Per-site flat index of ``x + e_axis``; -1 where it leaves the box."""
    idx = np.arange(domain.n_sites).reshape(domain.extents)
    shifted = np.roll(idx, -1, axis=axis)
    if not domain.periodic:
        sl = [slice(None)] * domain.d
        sl[axis] = -1
        shifted[tuple(sl)] = -1
    return shifted.ravel()


def gradient_matrix(domain: LatticeDomain, m: int = 1, axes=None) -> sp.csr_matrix:
    """Forward differences from interior unknowns to every (site, axis, component).

    Row ``(site * d + i) * m + alpha``; exterior and boundary values are zero.
    Edges leaving the bounding box of a non-periodic axis are dropped.
    """
    d = domain.d
    axes = range(d) if axes is None else axes
    rank = domain.unknown_index().ravel()
    sites = np.arange(domain.n_sites)
    rows, cols, vals = [], [], []
    for i in axes:
        nb = _axis_shift(domain, i)
        has_edge = nb >= 0
        for sgn, src in ((1.0, np.where(has_edge, nb, -1)), (-1.0, np.where(has_edge, sites, -1))):
            ok = src >= 0
            ok[ok] = rank[src[ok]] >= 0
            s = sites[ok]
            u = rank[src[ok]]
            for a in range(m):
                rows.append((s * d + i) * m + a)
                cols.append(u * m + a)
                vals.append(np.full(s.size, sgn))
    rows = np.concatenate(rows) if rows else np.zeros(0, int)
    cols = np.concatenate(cols) if cols else np.zeros(0, int)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(domain.n_sites * d * m, domain.n_interior * m))


def _block_diagonal(mats: np.ndarray) -> sp.csr_matrix:
    """Block-diagonal sparse matrix from ``(n, k, k)`` blocks, zeros dropped."""
    n, k, _ = mats.shape
    base = (np.arange(n) * k)[:, None, None]
    r = np.broadcast_to(base + np.arange(k)[None, :, None], mats.shape)
    c = np.broadcast_to(base + np.arange(k)[None, None, :], mats.shape)
    nz = mats != 0
    return sp.csr_matrix((mats[nz], (r[nz], c[nz])), shape=(n * k, n * k))


def _symmetrized(a: sp.spmatrix) -> sp.csr_matrix:
    out = ((a + a.T) * 0.5).tocsr()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def assemble_div_form(field: CoefficientField, domain: LatticeDomain | None = None) -> DivFormOperator:
    """Assemble ``Grad^T a Grad`` with lower-endpoint edge coefficients."""
    domain = field.domain if domain is None else domain
    if domain is not field.domain and (domain.extents != field.domain.extents
                                       or not np.array_equal(domain.interior_mask, field.domain.interior_mask)):
        raise OperatorError("field and domain do not match")
    d, m = field.d, field.m
    grad = gradient_matrix(domain, m)
    blocks = _block_diagonal(field.matrices().reshape(-1, d * m, d * m))
    a = grad.T @ blocks @ grad
    return DivFormOperator(_symmetrized(a), domain, m, field=field)


def check_order(n: int, d: int) -> None:
    if n % 2 == 0 or n <= d / 2 + 1:
        raise OperatorError(f"order n={n} must be odd and exceed d/2 + 1 = {d / 2 + 1:g}")


def assemble_hyperelliptic(domain: LatticeDomain, n: int = 3, m: int = 1, strict: bool = True) -> DivFormOperator:
    """``L_n = sum_i S_i^n`` with ``S_i`` the zero-extended second difference along axis i.

    ``strict=False`` skips the order restriction (the n=1 Laplacian sanity case).
    """
    if strict:
        check_order(n, domain.d)
    elif n < 1:
        raise OperatorError("order must be positive")
    total = sp.csr_matrix((domain.n_interior, domain.n_interior))
    for i in range(domain.d):
        g = gradient_matrix(domain, 1, axes=[i])
        s = (g.T @ g).tocsr()
        p = s
        for _ in range(n - 1):
            p = (p @ s).tocsr()
        total = total + p
    mat = sp.kron(total, sp.identity(m), format="csr")
    return DivFormOperator(_symmetrized(mat), domain, m, eps=1.0, n=n, kind="hyperelliptic")


def compose(a: DivFormOperator, eps: float, h: DivFormOperator) -> DivFormOperator:
    """``A + eps H`` on a shared unknown layout."""
    if eps < 0:
        raise OperatorError("eps must be >= 0")
    if a.matrix.shape != h.matrix.shape or a.m != h.m or a.domain.extents != h.domain.extents \
            or not np.array_equal(a.domain.interior_mask, h.domain.interior_mask):
        raise OperatorError("operators do not share an unknown layout")
    if eps == 0:
        return replace(a, eps=0.0, n=h.n)
    return replace(a, matrix=_symmetrized(a.matrix + eps * h.matrix), eps=float(eps), n=h.n, kind="composite")


@dataclass
class EllipticityEstimate:
    value: float
    converged: bool
    residual: float
    vector: np.ndarray | None = field(default=None, repr=False)

    def __float__(self) -> float:
        return self.value


def ellipticity_ratio(a_field: DivFormOperator, a_identity: DivFormOperator, probes: int = 20,
                      tol: float = 1e-10, seed: int = 0) -> EllipticityEstimate:
    """Smallest generalized eigenvalue of ``A_a v = lam A_I v``.

    Shift-invert Lanczos around zero with a Krylov space of ``probes`` vectors;
    convergence is judged from the generalized residual of the returned pair.
    """
    if a_field.eps != 0 or a_identity.eps != 0:
        raise OperatorError("ellipticity ratio is defined for eps = 0")
    if a_field.matrix.shape != a_identity.matrix.shape:
        raise OperatorError("operators do not share an unknown layout")
    N = a_field.N
    if N <= 2:
        from scipy.linalg import eigh
        w, v = eigh(a_field.dense(), a_identity.dense())
        return EllipticityEstimate(float(w[0]), True, 0.0, v[:, 0])
    ncv = min(N - 1, max(probes, 20))
    v0 = np.random.default_rng(seed).standard_normal(N)
    try:
        w, v = spla.eigsh(a_field.matrix.tocsc(), k=1, M=a_identity.matrix.tocsc(), sigma=0.0,
                          which="LM", ncv=ncv, tol=tol, v0=v0)
    except spla.ArpackNoConvergence as exc:
        if len(exc.eigenvalues) == 0:
            return EllipticityEstimate(float("nan"), False, float("inf"))
        w, v = exc.eigenvalues, exc.eigenvectors
    vec = v[:, 0]
    lam = float(w[0])
    mv = a_identity.matrix @ vec
    res = float(np.linalg.norm(a_field.matrix @ vec - lam * mv) / max(np.linalg.norm(mv), 1e-300))
    return EllipticityEstimate(lam, res <= 1e-6, res, vec)


def to_sites(domain: LatticeDomain, u: np.ndarray, m: int) -> np.ndarray:
    """Scatter an unknown vector onto a zero-padded site array ``(*extents, m)``."""
    out = np.zeros(domain.extents + (m,), dtype=np.result_type(u, float))
    out[domain.interior_mask] = u.reshape(-1, m)
    return out


def to_unknowns(domain: LatticeDomain, arr: np.ndarray) -> np.ndarray:
    return arr[domain.interior_mask].reshape(-1)


def site_gradient(u: np.ndarray, d: int, periodic: bool = False) -> np.ndarray:
    """Forward differences of a site array ``(*ext, m)`` -> ``(*ext, d, m)``.

    Without periodic wrap the last layer of each axis is set to zero.
    """
    grads = []
    for i in range(d):
        g = np.roll(u, -1, axis=i) - u
        if not periodic:
            sl = [slice(None)] * u.ndim
            sl[i] = -1
            g[tuple(sl)] = 0.0
        grads.append(g)
    return np.stack(grads, axis=d)


def site_residual(field: CoefficientField, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``-div a grad u`` on a full site array ``(*ext, m)`` without any boundary condition.

    Returns ``(residual, valid)`` where ``valid`` marks sites whose whole
    stencil lies in the box.  Sites with NaN data in the stencil are invalid.
    """
    d = field.d
    grad = site_gradient(u, d)
    flux = np.einsum("...iajb,...jb->...ia", field.tensors, grad)
    res = np.zeros_like(u)
    for i in range(d):
        res += np.roll(flux[..., i, :], 1, axis=i) - flux[..., i, :]
    valid = np.zeros(u.shape[:d], dtype=bool)
    valid[(slice(1, -1),) * d] = True
    bad = np.isnan(u).any(-1)
    for off in np.ndindex(*(3,) * d):
        valid &= ~np.roll(bad, tuple(1 - o for o in off), axis=tuple(range(d)))
    res[~valid] = 0.0
    return res, valid
