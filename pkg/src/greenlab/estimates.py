"""Measured versions of the Green-function bounds: double integrals, rates and annealed decay."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .coeff import CoefficientField, EnsembleSpec, sample_two_phase
from .green import GreenSolver, frob, grad_x
from .lattice import LatticeDomain, ball_mask
from .operator import site_gradient, site_residual
from .solver import SolverConfig

MAX_SOURCES = 16


class EstimateError(ValueError):
    pass


# ---------------------------------------------------------------- fits

@dataclass
class ExponentFit:
    points: list[tuple[float, float]]
    slope: float
    intercept: float
    r_squared: float
    window: tuple[float, float]


def _r2(y, yhat) -> float:
    ss_res = float(((y - yhat) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot <= 1e-24 * max(1.0, float((y**2).sum())):
        return 1.0 if ss_res <= 1e-24 else 0.0
    return max(0.0, 1.0 - ss_res / ss_tot)


def _check_points(points):
    pts = [(float(s), float(v)) for s, v in points]
    if len(pts) < 3:
        raise EstimateError("a fit needs at least 3 points")
    if any(v <= 0 or not np.isfinite(v) for _, v in pts):
        raise EstimateError("fit values must be positive and finite")
    return pts


def fit_power_law(points, window=None) -> ExponentFit:
    """Least squares of ``log value`` on ``log scale``; ``window`` = (lo, hi) scale filter."""
    pts = [(float(s), float(v)) for s, v in points]
    if window is not None:
        pts = [p for p in pts if window[0] <= p[0] <= window[1]]
    pts = _check_points(pts)
    x = np.log([s for s, _ in pts])
    y = np.log([v for _, v in pts])
    slope, intercept = np.polyfit(x, y, 1)
    win = (min(s for s, _ in pts), max(s for s, _ in pts))
    return ExponentFit(pts, float(slope), float(intercept), _r2(y, slope * x + intercept), win)


@dataclass
class RateFit:
    points: list[tuple[float, float]]
    rate: float
    intercept: float
    r_squared: float

    @property
    def passed(self) -> bool:
        return self.rate > 0


def fit_exponential_rate(points) -> RateFit:
    """Least squares of ``log value`` against scale; ``rate = -slope``."""
    pts = _check_points(points)
    x = np.array([s for s, _ in pts])
    y = np.log([v for _, v in pts])
    slope, intercept = np.polyfit(x, y, 1)
    rate = -float(slope)
    if abs(rate) < 1e-12:
        rate = 0.0
    return RateFit(pts, rate, float(intercept), _r2(y, slope * x + intercept))


# ---------------------------------------------------------------- reports

@dataclass
class DecayReport:
    """A measured bound: per-radius values, the fit and the verdict.

    ``mode`` is ``upper`` (slope <= target + band), ``window`` (|slope - target|
    <= band) or ``bounded`` (max/min <= band, no slope test).
    """

    estimate_id: str
    radii: list[float]
    values: list[float]
    fit: ExponentFit | None
    target: float
    band: float
    mode: str = "window"
    min_r2: float = 0.9
    provenance: dict = field(default_factory=dict)
    stderr: list[float] | None = None

    @property
    def ratio(self) -> float:
        v = np.asarray(self.values)
        return float(v.max() / v.min()) if v.min() > 0 else float("inf")

    @property
    def passed(self) -> bool:
        if self.mode == "bounded":
            return self.ratio <= self.band
        if self.fit is None or self.fit.r_squared < self.min_r2:
            return False
        if self.mode == "upper":
            return self.fit.slope <= self.target + self.band
        return abs(self.fit.slope - self.target) <= self.band

    def summary(self) -> str:
        if self.mode == "bounded":
            return f"{self.estimate_id}: max/min={self.ratio:.3f} (<= {self.band:g}) {'PASS' if self.passed else 'FAIL'}"
        rel = "<=" if self.mode == "upper" else "~"
        return (f"{self.estimate_id}: slope={self.fit.slope:.3f} {rel} {self.target:g}+-{self.band:g} "
                f"r2={self.fit.r_squared:.3f} {'PASS' if self.passed else 'FAIL'}")


def make_report(estimate_id, radii, values, target, band, mode="window", window=None, provenance=None,
                stderr=None, min_r2=0.9) -> DecayReport:
    fit = None
    pos = [(r, v) for r, v in zip(radii, values) if v > 0]
    if mode != "bounded" or len(pos) >= 3:
        try:
            fit = fit_power_law(pos, window)
        except EstimateError:
            fit = None
    return DecayReport(estimate_id, list(map(float, radii)), list(map(float, values)), fit, target, band,
                       mode, min_r2, dict(provenance or {}), None if stderr is None else list(map(float, stderr)))


@dataclass
class AnnealedReport:
    ensemble_hash: str
    n_samples: int
    n_success: int
    radii: list[float]
    means: dict[str, np.ndarray]
    stderrs: dict[str, np.ndarray]
    fits: dict[str, ExponentFit]
    failures: list[str] = field(default_factory=list)
    seeds: dict = field(default_factory=dict)

    def report(self, quantity: str, target: float, band: float, estimate_id: str) -> DecayReport:
        return make_report(estimate_id, self.radii, self.means[quantity], target, band,
                           provenance={"ensemble": self.ensemble_hash, "N": self.n_samples, **self.seeds},
                           stderr=self.stderrs[quantity])


# ---------------------------------------------------------------- source subsampling

@dataclass(frozen=True)
class SourceSample:
    sites: np.ndarray
    population: int
    seed: int

    @property
    def weight(self) -> float:
        return self.population / max(len(self.sites), 1)


def subsample_sources(domain: LatticeDomain, z, R: float, k: int = 8, seed: int = 0) -> SourceSample:
    """At most ``k`` interior sites of the ball ``|y - z| < R``, seeded and sorted.

    The estimator ``(population / k) * sum_{y in sample}`` is unbiased for the
    full sum over the ball.
    """
    if not 1 <= k <= MAX_SOURCES:
        raise EstimateError(f"source subsample size must lie in [1, {MAX_SOURCES}]")
    pop = np.argwhere(ball_mask(domain, z, R) & _source_ok(domain))
    if len(pop) <= k:
        return SourceSample(pop, len(pop), seed)
    key = int.from_bytes(hashlib.blake2b(repr((tuple(map(int, z)), float(R), int(seed))).encode(),
                                         digest_size=8).digest(), "little")
    idx = np.sort(np.random.default_rng(key).choice(len(pop), size=k, replace=False))
    return SourceSample(pop[idx], len(pop), seed)


def _source_ok(domain):
    # sources need y + e_j interior for the y-derivative solves
    ok = domain.interior_mask.copy()
    for j in range(domain.d):
        ok &= np.roll(domain.interior_mask, -1, axis=j)
    return ok


def _as_solver(obj, cfg=None) -> GreenSolver:
    if isinstance(obj, GreenSolver):
        return obj
    if isinstance(obj, CoefficientField):
        return GreenSolver(obj, cfg)
    raise TypeError("expected a CoefficientField or GreenSolver")


def _sources(solver, z, R, sources, seed):
    if sources is None or isinstance(sources, (int, np.integer)):
        return subsample_sources(solver.domain, z, R, 8 if sources is None else int(sources), seed)
    if isinstance(sources, SourceSample):
        return sources
    arr = np.atleast_2d(np.asarray(sources, dtype=int))
    return SourceSample(arr, len(arr), seed)


def _margin(domain: LatticeDomain, z) -> float:
    """Distance from z to the nearest Dirichlet layer."""
    out = np.inf
    for ax in domain.dirichlet_axes:
        out = min(out, z[ax], domain.extents[ax] - 1 - z[ax])
    return float(out)


def _require_margin(domain, z, radius, what):
    if radius > _margin(domain, z):
        raise EstimateError(f"{what}: radius {radius:g} around {tuple(z)} exceeds the domain margin "
                            f"{_margin(domain, z):g}")


def _grad_y_sq(solver, y):
    return sum(frob(solver.grad_y_bundle(y, j).values, 2) ** 2 for j in range(solver.domain.d))


# ---------------------------------------------------------------- near- and off-diagonal energies

def near_diagonal_weighted_energy(field, domain, z, R, alpha, source_subsample=None, seed=0,
                                  cfg: SolverConfig | None = None) -> float:
    """Estimate of ``sum_{|y-z|<R} sum_{|x-z|<R} |x-y|^alpha (|grad_x G|^2 + |grad_y G|^2)``."""
    solver = _as_solver(field, cfg)
    dom = solver.domain
    z = tuple(int(c) for c in z)
    if alpha <= dom.d - 2:
        raise EstimateError(f"alpha must exceed d - 2 = {dom.d - 2}")
    _require_margin(dom, z, R, "weighted energy")
    sample = _sources(solver, z, R, source_subsample, seed)
    xball = ball_mask(dom, z, R, interior_only=False)
    total = 0.0
    for y in sample.sites:
        y = tuple(int(c) for c in y)
        w = dom.distance(y) ** alpha
        gx = frob(grad_x(solver.bundle(y)), 3) ** 2
        gy = _grad_y_sq(solver, y)
        total += float((w * (gx + gy))[xball].sum())
    return sample.weight * total


def offdiagonal_gradient_energy(field, domain, z, R, source_subsample=None, seed=0,
                                cfg: SolverConfig | None = None) -> float:
    """Estimate of ``sum_{|y-z|<R} sum_{|x-z|>8R} |grad_x G|^2``."""
    solver = _as_solver(field, cfg)
    dom = solver.domain
    z = tuple(int(c) for c in z)
    _require_margin(dom, z, 8 * R, "off-diagonal energy")
    sample = _sources(solver, z, R, source_subsample, seed)
    far = dom.distance(z) > 8 * R
    total = 0.0
    for y in sample.sites:
        gx = frob(grad_x(solver.bundle(y)), 3) ** 2
        total += float(gx[far].sum())
    return sample.weight * total


def mixed_offdiagonal_energy(field, domain, z, R, source_subsample=None, seed=0,
                             cfg: SolverConfig | None = None) -> float:
    """Estimate of ``sum_{|y-z|<R} sum_{|x-z|>2R} |grad_x grad_y G|^2``."""
    solver = _as_solver(field, cfg)
    dom = solver.domain
    z = tuple(int(c) for c in z)
    _require_margin(dom, z, 2 * R, "mixed energy")
    sample = _sources(solver, z, R, source_subsample, seed)
    far = dom.distance(z) > 2 * R
    total = 0.0
    for y in sample.sites:
        mx = frob(solver.mixed(y), 4) ** 2
        total += float(mx[far].sum())
    return sample.weight * total


def near_diagonal_lp(field, domain, z, R, p, quantity="G", source_subsample=None, seed=0,
                     cfg: SolverConfig | None = None) -> float:
    """Estimate of ``sum_{|y-z|<R} sum_{|x-z|<R} |G|^p`` (or ``|grad_x G|^p + |grad_y G|^p``)."""
    solver = _as_solver(field, cfg)
    dom = solver.domain
    d = dom.d
    z = tuple(int(c) for c in z)
    if quantity == "G":
        if not (p >= 1 and (d <= 2 or p < d / (d - 2))):
            raise EstimateError(f"p={p} outside [1, d/(d-2))")
    elif quantity == "gradG":
        if not 1 <= p < d / (d - 1):
            raise EstimateError(f"q={p} outside [1, d/(d-1))")
    else:
        raise EstimateError(f"unknown quantity {quantity!r}")
    _require_margin(dom, z, R, "near-diagonal L^p")
    sample = _sources(solver, z, R, source_subsample, seed)
    total = 0.0
    if quantity == "G":
        xball = ball_mask(dom, z, R)
        for y in sample.sites:
            g = frob(solver.bundle(tuple(int(c) for c in y)).values, 2)
            total += float((g[xball] ** p).sum())
    else:
        xball = ball_mask(dom, z, R, interior_only=False)
        for y in sample.sites:
            y = tuple(int(c) for c in y)
            gx = frob(grad_x(solver.bundle(y)), 3)
            gy = np.sqrt(_grad_y_sq(solver, y))
            total += float((gx[xball] ** p + gy[xball] ** p).sum())
    return sample.weight * total


# ---------------------------------------------------------------- strips and exponential decay

def strip_axis(domain: LatticeDomain) -> int:
    if domain.shape != "strip" or domain.d != 2:
        raise EstimateError("strip estimates need a d=2 strip domain")
    return 1 - domain.bounded_axis


def strip_far_field_profile(field, domain, y, distances, cfg: SolverConfig | None = None) -> list[float]:
    """``E(t) = sum_{|x' - y'| >= t} |grad_x G|^2 + |G|^2`` along the unbounded axis."""
    solver = _as_solver(field, cfg)
    dom = solver.domain
    ax = strip_axis(dom)
    y = tuple(int(c) for c in y)
    b = solver.bundle(y)
    dens = frob(grad_x(b), 3) ** 2 + frob(b.values, 2) ** 2
    sep = np.abs(np.indices(dom.extents)[ax] - y[ax])
    return [float(dens[sep >= t].sum()) for t in distances]


def strip_offdiagonal_energy(field, domain, z, R, which="E", source_subsample=None, seed=0,
                             cfg: SolverConfig | None = None) -> float:
    """``sum_{|y-z|<R} sum_{|x-z|>4R}`` of ``|grad grad G|^2`` (``F``) or ``|grad G|^2 + |G|^2`` (``E``)."""
    solver = _as_solver(field, cfg)
    dom = solver.domain
    strip_axis(dom)
    z = tuple(int(c) for c in z)
    sample = _sources(solver, z, R, source_subsample, seed)
    far = dom.distance(z) > 4 * R
    total = 0.0
    for y in sample.sites:
        y = tuple(int(c) for c in y)
        if which == "F":
            dens = frob(solver.mixed(y), 4) ** 2
        elif which == "E":
            b = solver.bundle(y)
            dens = frob(grad_x(b), 3) ** 2 + frob(b.values, 2) ** 2
        else:
            raise EstimateError(f"unknown strip quantity {which!r}")
        total += float(dens[far].sum())
    return sample.weight * total


def strip_rate_oracle(width: int) -> tuple[float, float]:
    """(continuum ``pi/W``, discrete ``arccosh(1 + mu_1/2)``) for Dirichlet walls ``W`` apart."""
    mu1 = 2 - 2 * np.cos(np.pi / width)
    return float(np.pi / width), float(np.arccosh(1 + mu1 / 2))


# ---------------------------------------------------------------- annealed estimates

def shell_means(values: np.ndarray, dist: np.ndarray, radii, mask=None, width: float = 1.0) -> np.ndarray:
    """Averages over the thin shells ``r <= |x| < r + width``."""
    out = []
    for r in radii:
        sel = (dist >= r) & (dist < r + width)
        if mask is not None:
            sel &= mask
        if not sel.any():
            raise EstimateError(f"shell at radius {r} is empty")
        out.append(float(values[sel].mean()))
    return np.array(out)


def _annealed_sample(spec, idx, domain, y, radii, cfg, mixed=True):
    field = sample_two_phase(spec, idx, domain)
    solver = GreenSolver(field, cfg)
    try:
        b = solver.bundle(y)
        dist = domain.distance(y)
        g = shell_means(frob(b.values, 2), dist, radii, domain.interior_mask)
        dg = shell_means(frob(grad_x(b), 3), dist, radii)
        ddg = shell_means(frob(solver.mixed(y), 4), dist, radii) if mixed else np.full(len(radii), np.nan)
    except Exception as exc:  # a failed solve drops the sample
        return idx, None, f"sample {idx}: {exc}"
    its = [e["iterations"] for e in solver.log]
    return idx, (g, dg, ddg), f"sample {idx}: iterations {its}"


def annealed_pointwise(spec: EnsembleSpec, domain: LatticeDomain, radii, N: int,
                       cfg: SolverConfig | None = None, n_jobs: int = 1, y=None,
                       targets=None, mixed: bool = True) -> AnnealedReport:
    """Monte Carlo shell means of ``|G|``, ``|grad G|`` and ``|grad grad G|`` around one pole.

    Sample ``k`` is driven only by ``(spec.seed, k)`` and results are merged in
    sample order, so the output does not depend on ``n_jobs``.
    """
    if N < 1:
        raise EstimateError("N must be >= 1")
    radii = [float(r) for r in radii]
    y = domain.center if y is None else tuple(int(c) for c in y)
    if max(radii) > min(domain.extents) / 4:
        raise EstimateError("largest radius exceeds side/4")
    cfg = cfg or SolverConfig()
    jobs = (delayed(_annealed_sample)(spec, k, domain, y, radii, cfg, mixed) for k in range(N))
    if n_jobs == 1:
        results = [_annealed_sample(spec, k, domain, y, radii, cfg, mixed) for k in range(N)]
    else:
        results = Parallel(n_jobs=n_jobs)(jobs)
    results.sort(key=lambda t: t[0])
    good = [r for _, r, _ in results if r is not None]
    failures = [msg for _, r, msg in results if r is None]
    if len(good) < 0.9 * N:
        raise EstimateError(f"only {len(good)} of {N} samples succeeded: {failures[:3]}")
    names = ("G", "gradG", "gradgradG")
    means, errs, fits = {}, {}, {}
    d = domain.d
    targets = targets or {"G": 2 - d, "gradG": 1 - d, "gradgradG": -d}
    for q, name in enumerate(names):
        arr = np.array([g[q] for g in good])
        means[name] = arr.mean(0)
        errs[name] = arr.std(0, ddof=1) / np.sqrt(len(arr)) if len(arr) > 1 else np.zeros(len(radii))
        if np.all(np.isfinite(means[name])) and np.all(means[name] > 0):
            fits[name] = fit_power_law(list(zip(radii, means[name])))
    return AnnealedReport(spec.fingerprint(), N, len(good), radii, means, errs, fits, failures,
                          {"seed": spec.seed, "pole": list(y)})


def _moment_sample(spec, idx, domain, y, n_multi, radii, cfg):
    field = sample_two_phase(spec, idx, domain) if spec is not None else None
    return _moment_values(field, y, n_multi, radii, cfg)


def _moment_values(field, y, n_multi, radii, cfg):
    dom = field.domain
    b = GreenSolver(field, cfg).bundle(y)
    gsq = frob(grad_x(b), 3) ** 2
    off = dom.offsets(y).astype(float)
    weight = np.prod(off ** (2 * np.asarray(n_multi)), axis=-1)
    dist = dom.distance(y)
    return np.array([float((weight * gsq)[dist < R].sum()) for R in radii])


def weighted_gradient_moment(spec, domain: LatticeDomain, n_multi, radii, N: int = 1,
                             cfg: SolverConfig | None = None, n_jobs: int = 1, y=None):
    """Mean over N samples of ``sum_{|x-y|<R} (x-y)^{2n} |grad_x G(x, y)|^2`` for each R.

    ``spec`` may be an :class:`EnsembleSpec` or a fixed :class:`CoefficientField`.
    Returns ``(means, stderrs)``.
    """
    n_multi = tuple(int(k) for k in n_multi)
    d = domain.d
    if d != 3:
        raise EstimateError("the weighted moment is set up for d = 3")
    if len(n_multi) != d or any(k < 0 for k in n_multi):
        raise EstimateError("multi-index must have d non-negative entries")
    if not d / 2 - 1 < sum(n_multi) < d / 2:
        raise EstimateError(f"|n| = {sum(n_multi)} outside the window ({d / 2 - 1:g}, {d / 2:g})")
    y = domain.center if y is None else tuple(int(c) for c in y)
    radii = [float(r) for r in radii]
    cfg = cfg or SolverConfig()
    if isinstance(spec, CoefficientField):
        vals = np.array([_moment_values(spec, y, n_multi, radii, cfg)])
    else:
        if n_jobs == 1:
            rows = [_moment_sample(spec, k, domain, y, n_multi, radii, cfg) for k in range(N)]
        else:
            rows = Parallel(n_jobs=n_jobs)(delayed(_moment_sample)(spec, k, domain, y, n_multi, radii, cfg)
                                           for k in range(N))
        vals = np.array(rows)
    se = vals.std(0, ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else np.zeros(len(radii))
    return vals.mean(0), se


# ---------------------------------------------------------------- property batteries

@dataclass(frozen=True, eq=False)
class HarmonicField:
    """A site array ``(*ext, m)`` with the set where it is known to be a-harmonic.

    ``harmonic`` marks sites whose operator residual is at most ``tol``;
    ``zero`` marks Dirichlet sites where the field is pinned to zero.
    """

    values: np.ndarray
    harmonic: np.ndarray
    zero: np.ndarray
    tol: float


def annotate_harmonic(field: CoefficientField, u: np.ndarray, tol: float = 1e-8,
                      dirichlet: bool = True) -> HarmonicField:
    u = np.asarray(u, float)
    if u.ndim == field.d:
        u = u[..., None]
    res, valid = site_residual(field, u)
    harmonic = valid & (np.abs(res).max(-1) <= tol)
    zero = (~field.domain.interior_mask) & (np.abs(u).max(-1) == 0) if dirichlet else np.zeros_like(harmonic)
    return HarmonicField(u, harmonic, zero, tol)


def caccioppoli_ratio(u: HarmonicField, center, R: float) -> float:
    """``sum_{B_R} |grad u|^2 / (R^-2 sum_{B_2R} |u|^2)``; zero extension outside the array."""
    if not isinstance(u, HarmonicField):
        raise EstimateError("caccioppoli_ratio needs a field annotated with its a-harmonic region")
    vals = u.values
    d = vals.ndim - 1
    ext = vals.shape[:d]
    pad = int(np.ceil(2 * R)) + 2
    big = np.pad(vals, [(pad, pad)] * d + [(0, 0)])
    ok = np.pad(u.harmonic | u.zero, pad, constant_values=True)
    c = np.asarray(center) + pad
    grids = np.indices(big.shape[:d])
    dist = np.sqrt(sum((g - ci) ** 2 for g, ci in zip(grids, c)))
    inside = np.pad(np.ones(ext, bool), pad)
    big_ball = dist < 2 * R
    if not ok[big_ball & inside].all():
        raise EstimateError(f"B_2R around {tuple(center)} leaves the annotated a-harmonic region")
    grad = site_gradient(big, d, periodic=False)
    num = float((grad[dist < R] ** 2).sum())
    den = float((big[big_ball] ** 2).sum()) / R**2
    if num == 0:
        return 0.0
    return num / den


def caccioppoli_constant(lam: float) -> float:
    return 16.0 / lam**2


def psi_ratio(u: np.ndarray, domain: LatticeDomain, z, R: float, p: float = 4.0) -> float:
    """``(sum_{|x-z|>R} |u|^p)^(1/p) / (sum_{|x-z|>R} |grad u|^2)^(1/2)`` on all sites."""
    u = np.asarray(u, float)
    if u.ndim == domain.d:
        u = u[..., None]
    if np.abs(u[~domain.interior_mask]).max(initial=0) > 0:
        raise EstimateError("field must vanish off the strip interior")
    outer = domain.distance(z) > R
    lp = float((np.abs(u[outer]) ** p).sum()) ** (1 / p)
    energy = float((site_gradient(u, domain.d, domain.periodic)[outer] ** 2).sum())
    if energy == 0:
        return 0.0 if lp == 0 else float("inf")
    return lp / np.sqrt(energy)


def psi_constant(domain: LatticeDomain) -> float:
    """Rigorous p >= 2 constant from the one-sided Poincare inequality across the strip."""
    n = domain.extents[domain.bounded_axis] - 2
    return float(1.0 / np.sqrt(2 - 2 * np.cos(np.pi / (2 * n + 1))))


def random_strip_fields(domain: LatticeDomain, count: int, seed: int = 0) -> list[np.ndarray]:
    """White-noise, smoothed and localized fields vanishing off the strip interior."""
    rng = np.random.default_rng(seed)
    out = []
    ax = domain.bounded_axis
    for k in range(count):
        kind = k % 3
        u = rng.standard_normal(domain.extents)
        if kind == 1:
            for _ in range(4):
                u = sum(np.roll(u, s, axis=a) for a in range(domain.d) for s in (-1, 1)) / (2 * domain.d)
        elif kind == 2:
            c = rng.integers(0, domain.extents[1 - ax])
            along = np.abs(np.indices(domain.extents)[1 - ax] - c)
            u = np.exp(-along / rng.uniform(2, 8)) * np.sin(np.pi * np.indices(domain.extents)[ax]
                                                             / (domain.extents[ax] - 1))
        u = np.where(domain.interior_mask, u, 0.0)
        out.append(u)
    return out
