"""Green bundles, their derivatives, the regularized family and structural identities."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coeff import CoefficientField, write_flat_binary
from .lattice import LatticeDomain
from .operator import (DivFormOperator, assemble_div_form, assemble_hyperelliptic, compose,
                       gradient_matrix, site_gradient, to_sites)
from .solver import SolverConfig, cg_solve, dense_oracle_solve


class SolverFailure(RuntimeError):
    """A Green solve missed its tolerance; ``source`` names the offending pole."""

    def __init__(self, msg: str, source=None):
        super().__init__(msg)
        self.source = source


@dataclass(frozen=True, eq=False)
class GreenBundle:
    """The m columns ``G(., y) e_beta`` for one source.

    ``values[x][alpha, beta]`` is component alpha of column beta at site x,
    i.e. the matrix entry ``G(x, y)_{alpha beta}``.  Non-interior sites hold 0.
    """

    source: tuple[int, ...]
    values: np.ndarray = field(repr=False)
    domain: LatticeDomain = field(repr=False)
    field_hash: str = ""
    eps: float = 0.0
    n: int | None = None
    rel_tol: float = 0.0
    iterations: tuple[int, ...] = ()
    residuals: tuple[float, ...] = ()
    kind: str = "G"

    @property
    def m(self) -> int:
        return self.values.shape[-1]

    def at(self, x) -> np.ndarray:
        return self.values[tuple(int(c) for c in x)]

    def column(self, beta: int) -> np.ndarray:
        return self.values[..., beta]

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max())


class GreenSolver:
    """Holds the assembled operator of one field and caches bundles by source.

    ``method='dense'`` routes every solve through the Cholesky oracle.
    """

    def __init__(self, field: CoefficientField, cfg: SolverConfig | None = None, eps: float = 0.0,
                 n: int = 3, method: str = "cg", op: DivFormOperator | None = None):
        domain = field.domain
        if domain.periodic:
            raise ValueError("Green bundles need a Dirichlet (bounded) domain")
        if method not in ("cg", "dense"):
            raise ValueError(f"unknown solve method {method!r}")
        self.field = field
        self.domain = domain
        self.cfg = cfg or SolverConfig()
        self.eps = float(eps)
        self.n = n
        self.method = method
        base = op if op is not None else assemble_div_form(field)
        if eps > 0:
            base = compose(base, eps, assemble_hyperelliptic(domain, n, field.m))
        self.op = base
        self.rank = domain.unknown_index()
        self._hash = field.fingerprint()
        self._cache: dict = {}
        self.log: list[dict] = []

    @property
    def m(self) -> int:
        return self.field.m

    def _index(self, site) -> int:
        site = tuple(int(c) for c in site)
        if not self.domain.is_interior(site):
            raise ValueError(f"site {site} is not interior")
        return int(self.rank[site])

    def solve(self, rhs: np.ndarray, tag=None) -> tuple[np.ndarray, int, float]:
        if self.method == "dense":
            x = dense_oracle_solve(self.op, rhs)
            res = float(np.linalg.norm(self.op.matrix @ x - rhs) / max(np.linalg.norm(rhs), 1e-300))
            it = 0
        else:
            out = cg_solve(self.op, rhs, self.cfg)
            if not out.converged:
                raise SolverFailure(f"CG missed rel_tol {self.cfg.rel_tol:g} for source {tag}: "
                                    f"residual {out.final_residual:.3e} after {out.iterations} iterations", tag)
            x, it, res = out.solution, out.iterations, out.final_residual
        self.log.append({"source": tag, "iterations": it, "residual": res})
        return x, it, res

    def _bundle_from(self, key, plus, minus, kind) -> GreenBundle:
        if key in self._cache:
            return self._cache[key]
        m = self.m
        cols, its, res = [], [], []
        for beta in range(m):
            rhs = np.zeros(self.op.N)
            rhs[plus * m + beta] += 1.0
            if minus is not None:
                rhs[minus * m + beta] -= 1.0
            x, it, r = self.solve(rhs, tag=key)
            cols.append(to_sites(self.domain, x, m))
            its.append(it)
            res.append(r)
        vals = np.stack(cols, axis=-1)
        b = GreenBundle(tuple(key[1]), vals, self.domain, self._hash, self.eps, self.n if self.eps else None,
                        self.cfg.rel_tol if self.method == "cg" else 0.0, tuple(its), tuple(res), kind)
        self._cache[key] = b
        return b

    def bundle(self, y) -> GreenBundle:
        y = tuple(int(c) for c in y)
        return self._bundle_from(("G", y), self._index(y), None, "G")

    def grad_y_bundle(self, y, j: int) -> GreenBundle:
        """Solve with ``rhs = delta_{y+e_j} - delta_y`` per component."""
        y = tuple(int(c) for c in y)
        yp = list(y)
        yp[j] += 1
        if not self.domain.is_interior(yp):
            raise ValueError(f"y + e_{j} = {tuple(yp)} is not interior")
        b = self._bundle_from(("dyG", y, j), self._index(yp), self._index(y), f"dG/dy{j}")
        return b

    def mixed(self, y) -> np.ndarray:
        """``grad_x grad_y G(x, y)`` as ``(*ext, d_x, d_y, m, m)``."""
        return np.stack([grad_x(self.grad_y_bundle(y, j)) for j in range(self.domain.d)], axis=-3)

    def clear(self) -> None:
        self._cache.clear()


def green_bundle(field: CoefficientField, domain: LatticeDomain | None = None, y=None,
                 cfg: SolverConfig | None = None, method: str = "cg") -> GreenBundle:
    _check_domain(field, domain)
    return GreenSolver(field, cfg, method=method).bundle(field.domain.center if y is None else y)


def regularized_green(field: CoefficientField, domain: LatticeDomain | None, y, eps: float, n: int = 3,
                      cfg: SolverConfig | None = None, method: str = "cg") -> GreenBundle:
    _check_domain(field, domain)
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return GreenSolver(field, cfg, eps=eps, n=n, method=method).bundle(y)


def grad_y_bundle(field: CoefficientField, domain: LatticeDomain | None, y, j: int,
                  cfg: SolverConfig | None = None, method: str = "cg") -> GreenBundle:
    _check_domain(field, domain)
    return GreenSolver(field, cfg, method=method).grad_y_bundle(y, j)


def _check_domain(field, domain):
    if domain is not None and domain is not field.domain and domain.extents != field.domain.extents:
        raise ValueError("field and domain do not match")


def grad_x(bundle: GreenBundle) -> np.ndarray:
    """Forward differences ``(*ext, d, m, m)``; edges leaving the box are zero."""
    d = bundle.domain.d
    return site_gradient(bundle.values, d, bundle.domain.periodic)


def frob(arr: np.ndarray, n_axes: int) -> np.ndarray:
    """Frobenius norm over the trailing ``n_axes`` axes."""
    return np.sqrt((np.abs(arr) ** 2).sum(axis=tuple(range(-n_axes, 0))))


def weak_form_defect(bundle: GreenBundle, field: CoefficientField, zeta: np.ndarray) -> np.ndarray:
    """``sum_x grad zeta . a grad G e_beta - zeta(y)`` for each column beta.

    ``zeta`` is a site array ``(*ext, m)`` vanishing off the interior.
    """
    d = field.d
    gz = site_gradient(zeta, d, field.domain.periodic)
    gg = grad_x(bundle)
    d, m = field.d, field.m
    lhs = np.einsum("sia,siajb,sjbc->c", gz.reshape(-1, d, m), field.tensors.reshape(-1, d, m, d, m),
                    gg.reshape(-1, d, m, m))
    return lhs - zeta[bundle.source]


@dataclass
class Defect:
    value: float
    scale: float  # sup norm of the reference object

    def within(self, factor: float) -> bool:
        return self.value <= factor * self.scale


def check_symmetry(field: CoefficientField, domain: LatticeDomain | None, x, y,
                   cfg: SolverConfig | None = None, solver: GreenSolver | None = None) -> Defect:
    """``max |G(x, y) - G(y, x)^T|`` from the two bundles with poles y and x."""
    _check_domain(field, domain)
    solver = solver or GreenSolver(field, cfg)
    by, bx = solver.bundle(y), solver.bundle(x)
    gxy = by.at(x)
    gyx = bx.at(y)
    return Defect(float(np.abs(gxy - gyx.T).max()), max(by.sup_norm(), bx.sup_norm()))


@dataclass
class RepresentationCheck:
    defect: float
    u_sup: float
    n_points: int
    u_direct: np.ndarray = field(repr=False)
    u_formula: np.ndarray = field(repr=False)

    def within(self, factor: float) -> bool:
        return self.defect <= factor * self.u_sup


def _support_mask(f, g, d):
    sup = np.zeros(f.shape[:d], dtype=bool)
    if f is not None:
        sup |= (f != 0).any(-1)
    if g is not None:
        gsup = (g != 0).any(axis=(-1, -2))
        sup |= gsup
        for i in range(d):
            sup |= np.roll(gsup & (g[..., i, :] != 0).any(-1), 1, axis=i)
    return sup


def check_representation(field: CoefficientField, domain: LatticeDomain | None, f: np.ndarray | None,
                         g: np.ndarray | None, cfg: SolverConfig | None = None, eps: float = 0.0,
                         n: int = 3, eval_sites=None, method: str = "cg",
                         margin: int = 1) -> RepresentationCheck:
    """Compare the direct solve of ``-div a grad u (+ eps L u) = f + div g`` with
    ``sum_y G(y,x) f(y) - sum_y grad_y G(y,x) . g(y)`` evaluated from the bundle
    with pole x, at sites at least ``margin + 1`` steps from the data support.

    ``f`` is a site array ``(*ext, m)``; ``g`` is ``(*ext, d, m)`` with
    ``g[x, i]`` living on the edge ``(x, x + e_i)``.
    """
    _check_domain(field, domain)
    dom = field.domain
    d, m = field.d, field.m
    f = np.zeros(dom.extents + (m,)) if f is None else np.asarray(f, float)
    g = np.zeros(dom.extents + (d, m)) if g is None else np.asarray(g, float)
    sup = _support_mask(f, g, d)
    near = np.zeros_like(sup)
    for off in np.ndindex(*(3,) * d):
        near |= np.roll(sup, tuple(o - 1 for o in off), axis=tuple(range(d)))
    if (near & ~dom.interior_mask).any():
        raise ValueError("data support touches the boundary")

    solver = GreenSolver(field, cfg, eps=eps, n=n, method=method)
    grad = gradient_matrix(dom, m)
    rhs = f[dom.interior_mask].reshape(-1) - grad.T @ g.reshape(-1)
    u_vec, _, _ = solver.solve(rhs, tag="representation")
    u = to_sites(dom, u_vec, m)

    if eval_sites is None:
        dist = np.full(dom.extents, np.inf)
        for s in np.argwhere(sup):
            dist = np.minimum(dist, np.abs(dom.offsets(s)).max(-1))
        eval_sites = np.argwhere(dom.interior_mask & (dist > margin))
    defects, formula = [], {}
    for x in eval_sites:
        x = tuple(int(c) for c in x)
        bx = solver.bundle(x)
        gb = grad_x(bx)  # [y, i, beta, alpha] = d_i G(y, x)_{beta alpha}
        val = (np.einsum("sba,sb->a", bx.values.reshape(-1, m, m), f.reshape(-1, m))
               - np.einsum("siba,sib->a", gb.reshape(-1, d, m, m), g.reshape(-1, d, m)))
        formula[x] = val
        defects.append(np.abs(val - u[x]).max())
        solver.clear()
    return RepresentationCheck(float(max(defects)) if defects else 0.0, float(np.abs(u).max()),
                               len(defects), u, np.array([formula[tuple(map(int, x))] for x in eval_sites]))


@dataclass
class SweepResult:
    eps: list[float]
    errors: list[float]
    rel_errors: list[float]
    monotone: bool
    strictly_decreasing: bool
    findings: list[str]


def regularization_sweep(field: CoefficientField, domain: LatticeDomain | None, y, eps_list,
                         n: int = 3, cfg: SolverConfig | None = None, method: str = "cg",
                         slack: float = 0.05) -> SweepResult:
    """Errors ``||G_eps - G_0||_2`` along a descending list of eps."""
    _check_domain(field, domain)
    eps_list = [float(e) for e in eps_list]
    if any(a < b for a, b in zip(eps_list, eps_list[1:])) or any(e < 0 for e in eps_list):
        raise ValueError("eps_list must be non-negative and sorted descending")
    base = GreenSolver(field, cfg, method=method)
    g0 = base.bundle(y).values
    norm0 = np.linalg.norm(g0)
    errs = []
    for e in eps_list:
        ge = g0 if e == 0 else GreenSolver(field, cfg, eps=e, n=n, method=method, op=base.op).bundle(y).values
        errs.append(float(np.linalg.norm(ge - g0)))
    findings = [f"error rose from {a:.3e} (eps={ea:g}) to {b:.3e} (eps={eb:g})"
                for ea, eb, a, b in zip(eps_list, eps_list[1:], errs, errs[1:]) if b > (1 + slack) * a]
    strict = all(b < a for a, b in zip(errs, errs[1:]))
    return SweepResult(eps_list, errs, [e / norm0 for e in errs], not findings, strict, findings)


def export_bundle(bundle: GreenBundle, path) -> Path:
    """Flat binary of ``values`` plus a sidecar ``.hdr`` JSON text header."""
    path = Path(path)
    dom = bundle.domain
    write_flat_binary(path, bundle.values, dom.d, bundle.m, dom.extents)
    side = path.with_suffix(path.suffix + ".hdr")
    side.write_text(json.dumps({"field_hash": bundle.field_hash, "y": list(bundle.source),
                                "eps": bundle.eps, "n": bundle.n, "rel_tol": bundle.rel_tol,
                                "kind": bundle.kind}, sort_keys=True) + "\n")
    return side
