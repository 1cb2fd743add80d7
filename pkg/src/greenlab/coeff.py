"""Coefficient tensor fields: constant, elastic, De Giorgi and random two-phase."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .lattice import LatticeDomain

IDENTITY_LAMBDA = 0.999
ENSEMBLE_KINDS = ("iid-two-phase", "checkerboard-random")


class CoefficientError(ValueError):
    pass


def as_matrix(t: np.ndarray) -> np.ndarray:
    """View a tensor ``(..., d, m, d, m)`` as ``(..., dm, dm)``."""
    d, m = t.shape[-4], t.shape[-3]
    return t.reshape(t.shape[:-4] + (d * m, d * m))


def from_matrix(mat: np.ndarray, d: int, m: int) -> np.ndarray:
    return np.asarray(mat, dtype=float).reshape(mat.shape[:-2] + (d, m, d, m))


def isotropic(c: float, d: int, m: int = 1) -> np.ndarray:
    """The tensor ``c * I`` on ``Y^d`` with ``Y = R^m``."""
    return from_matrix(c * np.eye(d * m), d, m)


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Per-site tensors ``a(x)`` stored as an array ``(*extents, d, m, d, m)``.

    Index order is (gradient direction i, component alpha, direction j,
    component beta), so ``xi . a xi`` is ``einsum('ia,iajb,jb', xi, a, xi)``.
    """

    domain: LatticeDomain
    tensors: np.ndarray = field(repr=False)
    lambda_claimed: float = IDENTITY_LAMBDA
    ellipticity_kind: str = "StE"
    name: str = "field"

    def __post_init__(self):
        t = self.tensors
        if t.shape[: self.domain.d] != self.domain.extents or t.ndim != self.domain.d + 4:
            raise CoefficientError(f"tensor array {t.shape} does not fit domain {self.domain.extents}")
        if t.shape[-4] != self.domain.d or t.shape[-2] != self.domain.d or t.shape[-3] != t.shape[-1]:
            raise CoefficientError(f"bad tensor block shape {t.shape[-4:]}")
        if self.ellipticity_kind not in ("StE", "KC-only"):
            raise CoefficientError(f"unknown ellipticity kind {self.ellipticity_kind!r}")

    @property
    def d(self) -> int:
        return self.domain.d

    @property
    def m(self) -> int:
        return self.tensors.shape[-1]

    def matrices(self) -> np.ndarray:
        return as_matrix(self.tensors)

    def scaled(self, c: float) -> "CoefficientField":
        """Field ``c * a``; the Green function scales by ``1/c``."""
        return replace(self, tensors=c * self.tensors, name=f"{self.name}*{c:g}")

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(repr((self.domain.extents, self.domain.shape, self.m)).encode())
        h.update(np.ascontiguousarray(self.tensors, dtype="<f8").tobytes())
        return h.hexdigest()


def _site_broadcast(domain: LatticeDomain, tensor: np.ndarray) -> np.ndarray:
    return np.broadcast_to(tensor, domain.extents + tensor.shape).copy()


def identity_field(domain: LatticeDomain, m: int = 1) -> CoefficientField:
    return CoefficientField(domain, _site_broadcast(domain, isotropic(1.0, domain.d, m)),
                            lambda_claimed=IDENTITY_LAMBDA, name="identity")


def constant_field(domain: LatticeDomain, tensor: np.ndarray, lam: float, name: str = "constant") -> CoefficientField:
    return CoefficientField(domain, _site_broadcast(domain, np.asarray(tensor, float)),
                            lambda_claimed=lam, name=name)


def elasticity_tensor(mu: float, lame: float, d: int) -> np.ndarray:
    """Unscaled ``a xi = 2 mu sym(xi) + lame tr(xi) I`` with ``m = d``."""
    e = np.eye(d)
    return (mu * (np.einsum("ij,ab->iajb", e, e) + np.einsum("ib,aj->iajb", e, e))
            + lame * np.einsum("ia,jb->iajb", e, e))


def elasticity_field(mu: float, lame: float, domain: LatticeDomain, m: int | None = None) -> CoefficientField:
    """Linear elasticity, rescaled to unit operator norm.

    The pointwise form vanishes on antisymmetric gradients, so only the
    assembled (Korn) coercivity holds; on Dirichlet domains the discrete Korn
    identity gives the ratio ``mu / norm``.
    """
    d = domain.d
    if m is not None and m != d:
        raise CoefficientError(f"elasticity needs m = d, got m={m}, d={d}")
    if mu <= 0 or lame < 0:
        raise CoefficientError("need mu > 0 and lame >= 0")
    t = elasticity_tensor(mu, lame, d)
    norm = np.linalg.norm(as_matrix(t), 2)
    return CoefficientField(domain, _site_broadcast(domain, t / norm),
                            lambda_claimed=mu / norm, ellipticity_kind="KC-only",
                            name=f"elasticity(mu={mu:g},lame={lame:g})")


def de_giorgi_tensor(xhat: np.ndarray) -> np.ndarray:
    """Unscaled De Giorgi tensor(s) for unit direction(s) ``xhat`` (..., d).

    Quadratic form ``xi:xi + ((d-2) tr(xi) + d xhat.xi xhat)^2``.
    """
    xhat = np.asarray(xhat, float)
    d = xhat.shape[-1]
    e = np.eye(d)
    b = (d - 2) * e + d * xhat[..., :, None] * xhat[..., None, :]
    return np.einsum("ij,ab->iajb", e, e) + b[..., :, :, None, None] * b[..., None, None, :, :]


def de_giorgi_norm(d: int) -> float:
    # largest eigenvalue 1 + |B|_F^2 with B = (d-2) I + d xhat xhat^T
    return 1.0 + (d - 2) ** 2 * d + 2 * d * (d - 2) + d**2


def de_giorgi_field(domain: LatticeDomain, center=None) -> CoefficientField:
    """De Giorgi's counterexample field around ``center`` (default: domain center).

    Rescaled by ``1 / (1 + |B|_F^2)`` so the operator norm is one; the smallest
    eigenvalue is then exactly that constant.  The center site gets the
    (rescaled) identity.
    """
    d = domain.d
    if d != 3:
        raise CoefficientError(f"De Giorgi field is built for d=3, got d={d}")
    center = domain.center if center is None else tuple(center)
    x = domain.offsets(center).astype(float)
    r = np.sqrt((x**2).sum(-1, keepdims=True))
    at_origin = r[..., 0] == 0
    xhat = np.where(r > 0, x / np.where(r > 0, r, 1.0), 0.0)
    t = de_giorgi_tensor(xhat)
    t[at_origin] = isotropic(1.0, d, d)
    c = de_giorgi_norm(d)
    return CoefficientField(domain, t / c, lambda_claimed=1.0 / c, name="de-giorgi")


def de_giorgi_gamma(d: int = 3) -> float:
    return 0.5 * d * (1.0 - 1.0 / np.sqrt((2 * d - 2) ** 2 + 1))


def de_giorgi_solution(domain: LatticeDomain, center=None) -> tuple[np.ndarray, np.ndarray]:
    """``u(x) = x / |x|^gamma`` on all sites, shape (*extents, d).

    Returns ``(u, singular)``; ``singular`` flags sites with ``|x| < 1`` where
    the value is set to NaN.
    """
    d = domain.d
    if d != 3:
        raise CoefficientError(f"De Giorgi solution is built for d=3, got d={d}")
    center = domain.center if center is None else tuple(center)
    x = domain.offsets(center).astype(float)
    r = np.sqrt((x**2).sum(-1, keepdims=True))
    singular = r[..., 0] < 1
    with np.errstate(divide="ignore", invalid="ignore"):
        u = x / r ** de_giorgi_gamma(d)
    u[singular] = np.nan
    return u, singular


@dataclass(frozen=True)
class EnsembleSpec:
    """Stationary two-phase ensemble.

    ``iid-two-phase`` marks each site independently; ``checkerboard-random``
    marks blocks of side ``block`` independently with a uniformly random
    offset of the tiling, which keeps the law shift invariant.
    """

    a_low: np.ndarray
    a_high: np.ndarray
    p: float
    seed: int
    kind: str = "iid-two-phase"
    block: int = 2

    def __post_init__(self):
        if self.kind not in ENSEMBLE_KINDS:
            raise CoefficientError(f"unknown ensemble kind {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise CoefficientError(f"p must lie in [0, 1], got {self.p}")
        if self.a_low.shape != self.a_high.shape:
            raise CoefficientError("phase tensors differ in shape")
        for name, t in (("a_low", self.a_low), ("a_high", self.a_high)):
            mat = as_matrix(t)
            if not np.allclose(mat, mat.T, atol=1e-14):
                raise CoefficientError(f"{name} is not symmetric")
            ev = np.linalg.eigvalsh(mat)
            if ev[-1] > 1 + 1e-12 or ev[0] <= 0:
                raise CoefficientError(f"{name} violates boundedness or ellipticity: eig {ev[0]:.3g}..{ev[-1]:.3g}")

    @property
    def lam(self) -> float:
        return float(min(np.linalg.eigvalsh(as_matrix(t))[0] for t in (self.a_low, self.a_high)))

    @property
    def b_norm(self) -> float:
        """``max ||I - a||`` over the two phases."""
        dm = as_matrix(self.a_low).shape[0]
        return float(max(np.linalg.norm(np.eye(dm) - as_matrix(t), 2) for t in (self.a_low, self.a_high)))

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(repr((self.kind, self.p, self.seed, self.block)).encode())
        h.update(np.ascontiguousarray(self.a_low, "<f8").tobytes())
        h.update(np.ascontiguousarray(self.a_high, "<f8").tobytes())
        return h.hexdigest()


def scalar_two_phase(low: float, high: float, p: float, seed: int, d: int,
                     kind: str = "iid-two-phase") -> EnsembleSpec:
    return EnsembleSpec(isotropic(low, d), isotropic(high, d), p, seed, kind)


def site_uniforms(seed: int, sample_idx: int, shape) -> np.ndarray:
    """Uniforms keyed by ``(seed, sample_idx)``, one per site in lexicographic order.

    Philox is counter based, so site ``k`` reads counter block ``k`` of the
    keyed stream: no state is shared between samples.
    """
    gen = np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(sample_idx)]))
    return gen.random(int(np.prod(shape))).reshape(shape)


def sample_marks(spec: EnsembleSpec, sample_idx: int, extents) -> np.ndarray:
    """Boolean phase marks (True = ``a_high``) for one ensemble member."""
    extents = tuple(extents)
    if spec.kind == "iid-two-phase":
        return site_uniforms(spec.seed, sample_idx, extents) < spec.p
    s = spec.block
    coarse = tuple(n // s + 2 for n in extents)
    u = site_uniforms(spec.seed, sample_idx, (len(extents) + int(np.prod(coarse)),))
    offset = np.floor(u[: len(extents)] * s).astype(int)
    blocks = (u[len(extents):] < spec.p).reshape(coarse)
    idx = np.ix_(*[(np.arange(n) + o) // s for n, o in zip(extents, offset)])
    return blocks[idx]


def sample_two_phase(spec: EnsembleSpec, sample_idx: int, domain: LatticeDomain) -> CoefficientField:
    """Ensemble member ``sample_idx``; a pure function of its arguments."""
    marks = sample_marks(spec, sample_idx, domain.extents)
    if spec.a_low.shape[-4] != domain.d:
        raise CoefficientError("phase tensors do not match the domain dimension")
    t = np.where(marks[(...,) + (None,) * 4], spec.a_high, spec.a_low)
    return CoefficientField(domain, t, lambda_claimed=spec.lam,
                            name=f"{spec.kind}(p={spec.p:g},seed={spec.seed},n={sample_idx})")


@dataclass
class AxiomResult:
    axiom: str
    passed: bool
    value: float
    witness: tuple | None
    note: str = ""


@dataclass
class AxiomReport:
    results: dict[str, AxiomResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def __getitem__(self, key) -> AxiomResult:
        return self.results[key]

    def lines(self) -> list[str]:
        return [f"{r.axiom:5s} {'PASS' if r.passed else 'FAIL'} value={r.value:.3e} witness={r.witness}"
                for r in self.results.values()]


def validate_tensor_axioms(field: CoefficientField, sym_tol: float = 1e-14,
                           bdd_tol: float = 1e-12) -> AxiomReport:
    """Check (Sym), (bdd) and, for StE fields, the eigenvalue floor.

    Witnesses are the worst sites: largest symmetry defect, largest singular
    value, smallest eigenvalue of the symmetric part.
    """
    mats = field.matrices()
    flat = mats.reshape(-1, *mats.shape[-2:])
    ext = field.domain.extents

    def site(k):
        return tuple(int(i) for i in np.unravel_index(int(k), ext))

    asym = np.abs(flat - np.swapaxes(flat, -1, -2)).max(axis=(-1, -2))
    k_sym = int(np.argmax(asym))
    sym = AxiomResult("Sym", bool(asym[k_sym] <= sym_tol), float(asym[k_sym]), site(k_sym))

    sv = np.linalg.norm(flat, 2, axis=(-1, -2))
    k_bdd = int(np.argmax(sv))
    bdd = AxiomResult("bdd", bool(sv[k_bdd] <= 1 + bdd_tol), float(sv[k_bdd]), site(k_bdd))

    ev = np.linalg.eigvalsh(0.5 * (flat + np.swapaxes(flat, -1, -2)))[:, 0]
    k_ste = int(np.argmin(ev))
    if field.ellipticity_kind == "StE":
        ste = AxiomResult("StE", bool(ev[k_ste] >= field.lambda_claimed - 1e-12), float(ev[k_ste]), site(k_ste))
    else:
        ste = AxiomResult("StE", True, float(ev[k_ste]), site(k_ste),
                          note="not required (KC-only); see operator.ellipticity_ratio")
    return AxiomReport({"Sym": sym, "bdd": bdd, "StE": ste})


_MAGIC = b"GLAB"


def write_flat_binary(path, array: np.ndarray, d: int, m: int, extents) -> None:
    """Header (magic, d, m, extents as little-endian uint32) then float64 LE payload."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", d, m))
        fh.write(struct.pack(f"<{len(extents)}I", *extents))
        fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def read_flat_binary(path) -> tuple[int, int, tuple[int, ...], np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError("not a greenlab flat binary file")
    d, m = struct.unpack_from("<II", raw, 4)
    extents = struct.unpack_from(f"<{d}I", raw, 12)
    payload = np.frombuffer(raw, dtype="<f8", offset=12 + 4 * d)
    return d, m, tuple(extents), payload


def export_field(field: CoefficientField, path) -> None:
    write_flat_binary(path, field.tensors, field.d, field.m, field.domain.extents)


def load_field_tensors(path) -> np.ndarray:
    d, m, extents, payload = read_flat_binary(path)
    return payload.reshape(tuple(extents) + (d, m, d, m))
