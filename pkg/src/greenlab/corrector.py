"""Corrector equation on finite environment spaces of periodic coefficient fields.

An environment is an L-periodic assignment of alphabet letters to the sites of
the torus ``(Z/L)^d``.  Functions on the environment space are arrays indexed
by environment.  The horizontal derivative along ``e_i`` is the shift
difference, twisted by the frequency:

    (D^xi_i F)(w) = exp(-i xi_i) F(tau_i w) - F(w),

which is the lattice form of ``D - i xi`` (it reduces to ``D_i - i xi_i`` to
first order in ``xi``).
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .coeff import as_matrix

MAX_ENVIRONMENTS = 4096


class CorrectorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EnvironmentSpace:
    """Finite stationary ensemble of L-periodic fields.

    ``configs[k]`` lists the letters of environment k over the torus sites in
    lexicographic order; ``shift[i][k]`` is the index of ``tau_{e_i}`` applied
    to environment k, i.e. the field ``a(. + e_i)``.
    """

    L: int
    d: int
    alphabet: np.ndarray = field(repr=False)  # (n_letters, d, m, d, m)
    probs: np.ndarray = field(repr=False)
    mode: str = "exhaustive"
    configs: np.ndarray = field(repr=False, default=None)
    weights: np.ndarray = field(repr=False, default=None)
    shift: np.ndarray = field(repr=False, default=None)
    seed: int = 0

    @property
    def m(self) -> int:
        return self.alphabet.shape[-1]

    @property
    def size(self) -> int:
        return len(self.configs)

    def origin_tensors(self) -> np.ndarray:
        """``a(w)`` at the origin site as ``(n_env, dm, dm)`` matrices."""
        return as_matrix(self.alphabet[self.configs[:, 0]])

    def mean(self, values: np.ndarray) -> np.ndarray:
        return np.tensordot(self.weights, values, axes=(0, 0))

    @property
    def lam(self) -> float:
        used = np.unique(self.configs)
        return float(min(np.linalg.eigvalsh(as_matrix(self.alphabet[u]))[0] for u in used))

    @property
    def b_norm(self) -> float:
        dm = self.d * self.m
        used = np.unique(self.configs)
        return float(max(np.linalg.norm(np.eye(dm) - as_matrix(self.alphabet[u]), 2) for u in used))

    def relabeled(self, z) -> "EnvironmentSpace":
        """The same space listed in the order of ``tau_z`` applied to each environment."""
        perm = np.arange(self.size)
        for i, zi in enumerate(z):
            for _ in range(int(zi) % self.L):
                perm = self.shift[i][perm]
        inv = np.empty_like(perm)
        inv[perm] = np.arange(self.size)
        shift = np.array([inv[s[perm]] for s in self.shift])
        return EnvironmentSpace(self.L, self.d, self.alphabet, self.probs, self.mode,
                                self.configs[perm], self.weights[perm], shift, self.seed)


def _torus_shift_perm(L: int, d: int, axis: int) -> np.ndarray:
    """Site permutation realising ``c'(x) = c(x + e_axis)``."""
    idx = np.arange(L**d).reshape((L,) * d)
    return np.roll(idx, -1, axis=axis).ravel()


def enumerate_environments(L: int, alphabet, mode: str = "exhaustive", seed: int = 0, probs=None,
                           n_samples: int = 64, support_only: bool = True) -> EnvironmentSpace:
    """Product-measure environments on the L-torus.

    Exhaustive mode lists all ``|alphabet|^(L^d)`` configurations (capped at
    4096); sampled mode draws ``n_samples`` configurations with equal weights.
    With ``support_only`` zero-weight environments are dropped, which keeps
    the space shift closed.
    """
    alphabet = np.asarray(alphabet, dtype=float)
    if alphabet.ndim != 5:
        raise CorrectorError("alphabet must have shape (n_letters, d, m, d, m)")
    n_letters, d = alphabet.shape[0], alphabet.shape[1]
    probs = np.full(n_letters, 1.0 / n_letters) if probs is None else np.asarray(probs, float)
    if probs.shape != (n_letters,) or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-12:
        raise CorrectorError("letter probabilities must be non-negative and sum to 1")
    n_sites = L**d
    shifts = [_torus_shift_perm(L, d, i) for i in range(d)]
    if mode == "exhaustive":
        if n_letters**n_sites > MAX_ENVIRONMENTS:
            raise CorrectorError(f"{n_letters}^{n_sites} environments exceed {MAX_ENVIRONMENTS}; use sampled mode")
        configs = np.array(list(itertools.product(range(n_letters), repeat=n_sites)), dtype=np.int64)
        weights = np.prod(probs[configs], axis=1)
        if support_only:
            keep = weights > 0
            configs, weights = configs[keep], weights[keep]
    elif mode == "sampled":
        rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
        configs = rng.choice(n_letters, size=(n_samples, n_sites), p=probs)
        weights = np.full(n_samples, 1.0 / n_samples)
    else:
        raise CorrectorError(f"unknown mode {mode!r}")
    lookup = {tuple(c): k for k, c in enumerate(configs)}
    table = []
    for perm in shifts:
        row = [lookup.get(tuple(c[perm]), -1) for c in configs]
        table.append(row)
    table = np.array(table, dtype=np.int64)
    if mode == "exhaustive" and (table < 0).any():
        raise CorrectorError("environment set is not shift closed")
    return EnvironmentSpace(L, d, alphabet, probs, mode, configs, weights, table, seed)


def two_phase_alphabet(low: float, high: float, d: int) -> np.ndarray:
    e = np.eye(d)
    iso = np.einsum("ij,ab->iajb", e, np.eye(1))
    return np.stack([low * iso, high * iso])


# ---------------------------------------------------------------- horizontal operators

def _require_exhaustive(env: EnvironmentSpace):
    if env.mode != "exhaustive":
        raise CorrectorError("direct assembly needs the full (exhaustive) environment space")


def shift_matrix(env: EnvironmentSpace, axis: int) -> np.ndarray:
    """``(S F)(w) = F(tau_axis w)`` as a dense permutation matrix."""
    n = env.size
    s = np.zeros((n, n))
    s[np.arange(n), env.shift[axis]] = 1.0
    return s


def twisted_derivatives(env: EnvironmentSpace, xi) -> list[np.ndarray]:
    """``D^xi_i (x) I_m`` for each axis, acting on ``(n_env * m)`` vectors."""
    xi = np.asarray(xi, float)
    eye_m = np.eye(env.m)
    out = []
    for i in range(env.d):
        di = np.exp(-1j * xi[i]) * shift_matrix(env, i) - np.eye(env.size)
        out.append(np.kron(di, eye_m))
    return out


@dataclass
class HorizontalOperator:
    """Pieces of ``P (D^xi)* a D^xi`` in the weighted inner product of L^2(Omega).

    ``grad`` maps ``(n_env m)`` to ``(n_env d m)`` vectors (environment
    slowest, then axis, then component); ``amat`` applies ``a`` per
    environment; ``weight`` is the diagonal of the inner product.
    """

    grad: np.ndarray
    amat: np.ndarray
    weight: np.ndarray
    form: np.ndarray  # grad^H W a grad, Hermitian
    xi: np.ndarray

    def adjoint(self, flux: np.ndarray) -> np.ndarray:
        """L^2(Omega) adjoint of ``grad`` applied to a flux vector."""
        wf = self.weight_dm * flux if flux.ndim == 1 else self.weight_dm[:, None] * flux
        out = self.grad.conj().T @ wf
        return out / (self.weight_m if out.ndim == 1 else self.weight_m[:, None])

    @property
    def weight_dm(self) -> np.ndarray:
        k = self.grad.shape[0] // len(self.weight)
        return np.repeat(self.weight, k)

    @property
    def weight_m(self) -> np.ndarray:
        k = self.grad.shape[1] // len(self.weight)
        return np.repeat(self.weight, k)


def assemble_horizontal(env: EnvironmentSpace, xi) -> HorizontalOperator:
    _require_exhaustive(env)
    d, m, n = env.d, env.m, env.size
    ds = twisted_derivatives(env, xi)
    # rows ordered (env, axis, component)
    grad = np.stack([dd.reshape(n, m, n * m) for dd in ds], axis=1).reshape(n * d * m, n * m)
    amat = sla.block_diag(*env.origin_tensors())
    w = np.repeat(env.weights, d * m)
    form = grad.conj().T @ (w[:, None] * (amat @ grad))
    form = 0.5 * (form + form.conj().T)
    return HorizontalOperator(grad, amat, env.weights, form, np.asarray(xi, float))


@dataclass
class CorrectorField:
    """``phi[k, e]``: value of ``Phi(w_k, xi) e`` (m-vector) for each unit input ``e`` of ``Y^d``.

    ``grad[k]`` is the ``(dm, dm)`` matrix ``(D^xi Phi)(w_k)`` whose column e
    is the twisted gradient of the e-th corrector.
    """

    xi: np.ndarray
    phi: np.ndarray
    grad: np.ndarray
    residual: float
    T: float = np.inf
    iterations: int = 0
    method: str = "direct"
    increments: list = field(default_factory=list)


def _mean_zero_basis(env: EnvironmentSpace) -> np.ndarray:
    wt = np.kron(env.weights[None, :], np.eye(env.m))
    return sla.null_space(wt)


def _unpack_grad(vec: np.ndarray, n: int, d: int, m: int) -> np.ndarray:
    return vec.reshape(n, d * m, -1)


def corrector_residual(env: EnvironmentSpace, op: HorizontalOperator, phi_vec: np.ndarray,
                       T: float = np.inf) -> float:
    """Max of ``|P (D^xi)* a (D^xi phi + e)|`` (+ ``phi / T``) over environments and inputs."""
    n, d, m = env.size, env.d, env.m
    e_field = np.tile(np.eye(d * m), (n, 1))
    flux = op.amat @ (op.grad @ phi_vec + e_field)
    div = op.adjoint(flux)
    if np.isfinite(T):
        div = div + phi_vec / T
    div = div.reshape(n, m, -1)
    div = div - env.mean(div)[None]
    return float(np.abs(div).max())


def solve_phi_direct(env: EnvironmentSpace, xi, T: float = np.inf) -> CorrectorField:
    """Dense solve of the corrector equation on mean-zero functions.

    ``T`` finite adds the mass term ``phi / T``.  Singular cases (frequencies
    aliasing onto the torus dual lattice) are solved in the least-squares
    sense; the gradient ``D^xi phi`` is unique there.
    """
    _require_exhaustive(env)
    n, d, m = env.size, env.d, env.m
    op = assemble_horizontal(env, xi)
    q = _mean_zero_basis(env)
    e_field = np.tile(np.eye(d * m), (n, 1))
    w_dm = np.repeat(env.weights, d * m)
    rhs = -(op.grad.conj().T @ (w_dm[:, None] * (op.amat @ e_field)))
    lhs = op.form
    if np.isfinite(T):
        lhs = lhs + np.diag(np.repeat(env.weights, m)) / T
    coef, *_ = np.linalg.lstsq(q.conj().T @ lhs @ q, q.conj().T @ rhs, rcond=1e-13)
    phi_vec = q @ coef
    res = corrector_residual(env, op, phi_vec, T)
    grad = _unpack_grad(op.grad @ phi_vec, n, d, m)
    return CorrectorField(np.asarray(xi, float), phi_vec.reshape(n, m, d * m), grad, res, T, 0, "direct")


# ---------------------------------------------------------------- kernel and Neumann series

def kernel_symbol(k: np.ndarray, T: float) -> np.ndarray:
    """``-(e^{ik_i} - 1)(e^{-ik_j} - 1) / (1/T + sum_l (2 - 2 cos k_l))`` on ``(..., d)`` frequencies."""
    fwd = np.exp(1j * k) - 1
    den = (2 - 2 * np.cos(k)).sum(-1)
    if np.isfinite(T):
        den = den + 1.0 / T
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -fwd[..., :, None] * fwd[..., None, :].conj() / den[..., None, None]
    return np.nan_to_num(out)


def folded_kernel(L: int, d: int, xi, T: float) -> np.ndarray:
    """Periodised, frequency-twisted second differences of the massive Green function.

    Returns ``P`` of shape ``(L,)*d + (d, d)`` with
    ``P(r) = L^-d sum_k K_hat(k - xi) e^{-i k.r}`` over ``k in (2 pi / L) Z_L^d``;
    equivalently ``P(r) = sum_{x = r mod L} K(-x) e^{-i x.xi}`` with ``K`` the
    whole-lattice kernel of symbol ``K_hat``.
    """
    grid = 2 * np.pi * np.arange(L) / L
    ks = np.stack(np.meshgrid(*([grid] * d), indexing="ij"), axis=-1)
    sym = kernel_symbol(ks - np.asarray(xi, float), T)
    axes = tuple(range(d))
    return np.fft.fftn(sym, axes=axes) / L**d


def apply_kernel(env: EnvironmentSpace, P: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``(T rho)(w) = sum_r P(r) (P rho)(tau_r w)`` for ``rho`` of shape ``(n_env, d, m, ...)``.

    The input is first projected to mean zero.
    """
    rho = rho - env.mean(rho)[None]
    L, d = env.L, env.d
    out = np.zeros(rho.shape, dtype=complex)
    for r in itertools.product(range(L), repeat=d):
        perm = np.arange(env.size)
        for i, ri in enumerate(r):
            for _ in range(ri):
                perm = env.shift[i][perm]
        out += np.einsum("ij,nj...->ni...", P[r], rho[perm])
    return out


@dataclass
class NeumannDivergence(RuntimeError):
    message: str
    b_norm: float

    def __str__(self):
        return f"{self.message} (||b|| = {self.b_norm:.3f})"


def solve_phi_neumann(env: EnvironmentSpace, xi, T: float = 1e4, k_max: int = 200,
                      tol: float = 1e-10) -> CorrectorField:
    """Gradient of the corrector from ``v = (1 + T b)^-1 T P(a e)`` by fixed-point iteration.

    ``b = I - a``.  The series ``v_{j+1} = v_0 - T(b v_j)`` contracts when
    ``||b|| < 1``.  Returns the twisted gradient data only (``phi`` is None).
    """
    _require_exhaustive(env)
    n, d, m = env.size, env.d, env.m
    bnorm = env.b_norm
    if bnorm >= 1:
        raise NeumannDivergence("Neumann series needs ||I - a|| < 1", bnorm)
    P = folded_kernel(env.L, d, xi, T)
    amats = env.origin_tensors()
    bmats = np.eye(d * m)[None] - amats

    def kern(rho):  # rho: (n, dm, dm) with columns = inputs
        r = rho.reshape(n, d, m, d * m)
        return apply_kernel(env, P, r).reshape(n, d * m, d * m)

    v0 = kern(np.broadcast_to(amats, (n, d * m, d * m)).astype(complex))
    v = v0.copy()
    incs, it = [], 0
    for it in range(1, k_max + 1):
        v_new = v0 - kern(np.einsum("nij,njk->nik", bmats, v))
        inc = float(np.abs(v_new - v).max())
        v = v_new
        incs.append(inc)
        if inc < tol:
            break
        if len(incs) > 5 and inc > 10 * incs[0]:
            raise NeumannDivergence(f"increments grew to {inc:.3e}", bnorm)
    return CorrectorField(np.asarray(xi, float), None, v, float("nan"), T, it, "neumann", incs)


def kernel_operator_matrix(env: EnvironmentSpace, xi, T: float) -> np.ndarray:
    """``-D (1/T + D* D)^-1 P D*`` as a dense matrix on ``(n_env d m)`` vectors (oracle)."""
    n, d, m = env.size, env.d, env.m
    op = assemble_horizontal(env, xi)
    lap = op.adjoint(op.grad)
    if np.isfinite(T):
        lap = lap + np.eye(n * m) / T
    proj = np.eye(n * m) - np.tile(np.kron(env.weights[None, :], np.eye(m)), (n, 1))
    return -op.grad @ np.linalg.pinv(lap, rcond=1e-13) @ proj @ op.adjoint(np.eye(n * d * m))


def v10_check(xi, T: float = 100.0, M: int = 512, L: int = 2, dxi: float = 1e-3, axis: int = 0) -> dict:
    """Compare the numerical xi-derivative of the folded kernel with the x-weighted kernel.

    The whole-lattice massive kernel is sampled on an M-torus (M large so the
    wrap error ``~exp(-M / sqrt(T))`` is negligible) and folded onto the L-torus.
    """
    xi = np.asarray(xi, float)
    d = xi.size
    grid = 2 * np.pi * np.fft.fftfreq(M)
    ks = np.stack(np.meshgrid(*([grid] * d), indexing="ij"), axis=-1)
    sym = kernel_symbol(ks, T)
    kx = np.fft.ifftn(sym, axes=tuple(range(d)))  # K(x) = M^-d sum_k K_hat(k) e^{ikx}
    neg = (-np.arange(M)) % M
    kx = kx[np.ix_(*([neg] * d))]  # reflected kernel K(-x)
    coords = np.stack(np.meshgrid(*([np.fft.fftfreq(M, 1 / M).astype(int)] * d), indexing="ij"), axis=-1)

    def fold(weights):
        out = np.zeros((L,) * d + (d, d), dtype=complex)
        red = coords % L
        flat = np.ravel_multi_index(tuple(red[..., i] for i in range(d)), (L,) * d)
        for comp in itertools.product(range(d), repeat=2):
            vals = (weights * kx[(...,) + comp]).ravel()
            acc = np.bincount(flat.ravel(), weights=vals.real, minlength=L**d) \
                + 1j * np.bincount(flat.ravel(), weights=vals.imag, minlength=L**d)
            out[(...,) + comp] = acc.reshape((L,) * d)
        return out

    def phase(x_):
        return np.exp(-1j * (coords @ x_))

    ep = np.zeros(d)
    ep[axis] = dxi
    numeric = (fold(phase(xi + ep)) - fold(phase(xi - ep))) / (2 * dxi)
    analytic = fold(-1j * coords[..., axis] * phase(xi))
    direct = fold(phase(xi))
    fft_route = folded_kernel(L, d, xi, T)
    return {"derivative_error": float(np.abs(numeric - analytic).max()),
            "derivative_scale": float(np.abs(analytic).max()),
            "fold_error": float(np.abs(direct - fft_route).max()),
            "dxi": dxi}


# ---------------------------------------------------------------- effective tensor and bounds

@dataclass
class EffectiveTensor:
    xi: np.ndarray
    q: np.ndarray
    hermitian_defect: float
    min_margin: float  # min over probes of (y.q y)/|y|^2 - lambda
    max_margin: float  # min over probes of 1 - (y.q y)/|y|^2
    probe_values: np.ndarray = field(repr=False, default=None)

    @property
    def sandwich_ok(self) -> bool:
        return self.min_margin >= -1e-12 and self.max_margin >= -1e-12


def effective_tensor(env: EnvironmentSpace, xi, phi: CorrectorField, probes: int = 32,
                     seed: int = 0) -> EffectiveTensor:
    """``q(xi) = <a> + <a D^xi Phi>`` with Hermitian and sandwich diagnostics."""
    amats = env.origin_tensors()
    q = env.mean(amats) + env.mean(np.einsum("nij,njk->nik", amats, phi.grad))
    herm = float(np.abs(q - q.conj().T).max())
    rng = np.random.default_rng(seed)
    dm = q.shape[0]
    ys = rng.standard_normal((probes, dm)) + 1j * rng.standard_normal((probes, dm))
    vals = np.einsum("pi,ij,pj->p", ys.conj(), q, ys).real / (np.abs(ys) ** 2).sum(1)
    lam = env.lam
    return EffectiveTensor(np.asarray(xi, float), q, herm, float((vals - lam).min()),
                           float((1 - vals).min()), vals)


def b10_norm(env: EnvironmentSpace, phi: CorrectorField) -> tuple[float, float]:
    """(operator, Frobenius) L^2(Omega) norms of ``D^xi Phi``."""
    g = phi.grad
    gram = env.mean(np.einsum("nji,njk->nik", g.conj(), g))
    op = float(np.sqrt(max(np.linalg.eigvalsh(0.5 * (gram + gram.conj().T))[-1], 0.0)))
    fro = float(np.sqrt(max(np.trace(gram).real, 0.0)))
    return op, fro


def default_xi_list(d: int = 2) -> list[np.ndarray]:
    """Eight frequencies from the 8-point grid per axis in (-pi, pi], none equal to 0."""
    grid = -np.pi + 2 * np.pi * np.arange(1, 9) / 8
    out = []
    for k in range(8):
        xi = np.array([grid[(k + 2 * i) % 8] for i in range(d)])
        out.append(xi)
    return out


@dataclass
class CorrectorReport:
    rows: list[dict]

    @property
    def passed(self) -> bool:
        return all(r["pass"] for r in self.rows)


def verify_corrector_bounds(env: EnvironmentSpace, xi_list=None, probes: int = 32, T: float = 1e4,
                            neumann: bool = True, k_max: int = 200) -> CorrectorReport:
    """Per frequency: residual, (energy) norm, Hermitian defect, sandwich margins and
    the Neumann/direct gap at the same mass."""
    _require_exhaustive(env)
    xi_list = default_xi_list(env.d) if xi_list is None else xi_list
    lam = env.lam
    rows = []
    for k, xi in enumerate(xi_list):
        phi = solve_phi_direct(env, xi)
        eff = effective_tensor(env, xi, phi, probes, seed=k)
        op_norm, fro = b10_norm(env, phi)
        row = {"xi": [float(v) for v in xi], "residual": phi.residual, "b10": op_norm, "b10_frobenius": fro,
               "hermitian_defect": eff.hermitian_defect, "min_margin": eff.min_margin,
               "max_margin": eff.max_margin, "q": eff.q}
        ok = phi.residual <= 1e-10 and op_norm <= 1 / lam + 1e-9 and eff.hermitian_defect <= 1e-10 \
            and eff.sandwich_ok
        if neumann and env.b_norm < 1:
            direct_t = solve_phi_direct(env, xi, T=T)
            neu = solve_phi_neumann(env, xi, T=T, k_max=k_max)
            gap = float(np.abs(neu.grad - direct_t.grad).max())
            row.update(neumann_gap=gap, neumann_iterations=neu.iterations,
                       massless_gap=float(np.abs(neu.grad - phi.grad).max()))
            ok = ok and gap <= 1e-6
        row["pass"] = bool(ok)
        rows.append(row)
    return CorrectorReport(rows)


def export_q_table(report: CorrectorReport, path) -> None:
    """CSV with xi components, real/imag q entries and the probe margins."""
    rows = report.rows
    if not rows:
        raise CorrectorError("empty report")
    d = len(rows[0]["xi"])
    dm = rows[0]["q"].shape[0]
    header = [f"xi{i}" for i in range(d)]
    for i in range(dm):
        for j in range(dm):
            header += [f"q{i}{j}_re", f"q{i}{j}_im"]
    header += ["min_margin", "max_margin"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            line = [f"{v:.17g}" for v in r["xi"]]
            for v in r["q"].ravel():
                line += [f"{v.real:.17g}", f"{v.imag:.17g}"]
            line += [f"{r['min_margin']:.17g}", f"{r['max_margin']:.17g}"]
            w.writerow(line)
