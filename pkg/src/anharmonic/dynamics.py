"""Severed Hamiltonian dynamics on finite boxes.

Only interaction terms whose whole offset set lies inside the box act on the
box's sites; terms straddling the boundary are dropped.  Time stepping is
Stormer-Verlet, which is symplectic and time reversible, so volume
preservation and the reversal identity hold for the discrete map itself.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import BoxGeometry, LatticeModel, box_sites, gamma_to_complement

__all__ = [
    "BlowUpError",
    "BoxSystem",
    "Configuration",
    "IntegratorSchedule",
    "Trajectory",
    "BandMatrix",
    "BoundCheck",
    "LocalityTable",
    "force",
    "step",
    "integrate",
    "evolve",
    "time_reverse",
    "expm_scaled_squaring",
    "a_priori_matrix",
    "locality_experiment",
    "poisson_bracket_E0_H",
    "step_jacobian_determinant",
    "write_snapshot",
    "read_snapshot",
    "write_trajectory_manifest",
]

BLOWUP_CEILING = 1e12


class BlowUpError(FloatingPointError):
    """Per-site energy left the configured ceiling; the step is too large."""

    def __init__(self, message, site=None, time=None):
        super().__init__(message)
        self.site = site
        self.time = time


class BoxSystem:
    """A model compiled onto a box: index arrays for every placed term.

    Construction is the expensive part; everything else is array arithmetic
    over the batch axes of ``q`` and ``p``.
    """

    def __init__(self, model: LatticeModel, geom: BoxGeometry):
        if geom.nu != model.nu:
            raise ValueError(f"geometry dimension {geom.nu} != model dimension {model.nu}")
        self.model = model
        self.geom = geom
        self.placements: list[tuple] = []
        for t in model.terms:
            if t.is_zero:
                continue
            offs = np.asarray(t.offsets)
            cand = geom.sites[:, None, :] + offs[None, :, :]
            inside = np.all(geom.contains(cand), axis=1)
            if inside.any():
                self.placements.append((t, geom.index(cand[inside])))
        self.gamma = gamma_to_complement(model, geom)
        # sites whose every interaction term is inside the box
        self.complete = self.gamma >= 2

    @property
    def n_sites(self) -> int:
        return self.geom.n_sites

    def onsite(self, q):
        return self.model.onsite.value(q)

    def potential(self, q):
        """Severed potential energy ``sum_{Delta in box} W_Delta``."""
        v = self.onsite(q).sum(axis=-1)
        for t, idx in self.placements:
            v = v + t.value(q[..., idx, :]).sum(axis=-1)
        return v

    def force(self, q):
        """``-grad`` of the severed potential, same shape as ``q``."""
        f = -self.model.onsite.grad(q)
        for t, idx in self.placements:
            g = t.grad(q[..., idx, :])
            for m in range(t.arity):
                # slot m of distinct placements never hits the same site twice
                f[..., idx[:, m], :] -= g[..., :, m, :]
        return f

    def interaction_force(self, q):
        return self.force(q) + self.model.onsite.grad(q)

    def kinetic(self, p):
        return 0.5 * (p * p).sum(axis=-1)

    def hamiltonian(self, q, p):
        return self.kinetic(p).sum(axis=-1) + self.potential(q)

    def energy_noninteracting(self, q, p):
        """``E_i^{n.i.} = K_i + W_i`` per site."""
        return self.kinetic(p) + self.onsite(q)

    def energy_local(self, q, p):
        """``E_i = K_i + sum_{Delta ni i} W_Delta / #Delta`` (exact at complete sites)."""
        e = self.energy_noninteracting(q, p)
        for t, idx in self.placements:
            share = t.value(q[..., idx, :]) / t.arity
            for m in range(t.arity):
                e[..., idx[:, m]] += share
        return e

    def bracket(self, q, p):
        """``{E_i, H}`` per site, exact at complete sites."""
        out = np.zeros(np.broadcast_shapes(q.shape, p.shape)[:-1], dtype=np.result_type(q, p))
        for t, idx in self.placements:
            g = t.grad(q[..., idx, :])  # (..., P, k, d)
            pg = (p[..., idx, :] * g).sum(axis=-1)  # (..., P, k)
            mean = pg.sum(axis=-1) / t.arity
            for m in range(t.arity):
                out[..., idx[:, m]] += mean - pg[..., m]
        return out


@dataclass
class Configuration:
    """Canonical coordinates on a box, arrays of shape ``(..., n_sites, site_dim)``.

    Leading axes, when present, index independent samples.
    """

    q: np.ndarray
    p: np.ndarray
    geom: BoxGeometry

    def __post_init__(self):
        if self.q.shape != self.p.shape or self.q.ndim < 2 or self.q.shape[-2] != self.geom.n_sites:
            raise ValueError(f"q {self.q.shape} / p {self.p.shape} do not match the box")

    @classmethod
    def zeros(cls, geom: BoxGeometry, site_dim: int = 1) -> "Configuration":
        z = np.zeros((geom.n_sites, site_dim))
        return cls(z, z.copy(), geom)

    def site(self, i) -> tuple[np.ndarray, np.ndarray]:
        k = self.geom.index(i)
        return self.q[..., k, :], self.p[..., k, :]

    def restrict(self, geom: BoxGeometry) -> "Configuration":
        """Restriction to a smaller box with the same origin."""
        k = self.geom.index(geom.sites)
        return Configuration(self.q[..., k, :].copy(), self.p[..., k, :].copy(), geom)

    def copy(self) -> "Configuration":
        return Configuration(self.q.copy(), self.p.copy(), self.geom)


@dataclass(frozen=True)
class IntegratorSchedule:
    h: float
    t_end: float
    scheme: str = "stormer-verlet"

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"step must be positive, got {self.h}")
        if self.scheme != "stormer-verlet":
            raise ValueError(f"unsupported scheme {self.scheme!r}")
        if abs(self.t_end) / self.h > 2**53:
            raise ValueError("t_end / h overflows the step counter")

    @property
    def n_steps(self) -> int:
        return max(int(math.ceil(abs(self.t_end) / self.h - 1e-9)), 0)

    @property
    def signed_step(self) -> float:
        """Step actually used: divides ``t_end`` exactly, sign of ``t_end``."""
        n = self.n_steps
        return self.t_end / n if n else 0.0


def _systems_cache(model, geom, cache={}):
    key = (id(model), model.hash, geom.nu, geom.a)
    sys_ = cache.get(key)
    if sys_ is None or sys_.model is not model:
        if len(cache) > 64:
            cache.clear()
        sys_ = cache[key] = BoxSystem(model, geom)
    return sys_


def force(model: LatticeModel, cfg: Configuration, i=None):
    """Severed force at site ``i`` (all sites if ``i`` is None)."""
    f = _systems_cache(model, cfg.geom).force(cfg.q)
    return f if i is None else f[..., cfg.geom.index(i), :]


def _check_finite(q, p, t):
    bad = ~(np.isfinite(q).all(axis=-1) & np.isfinite(p).all(axis=-1))
    if bad.any():
        where = np.argwhere(bad)[0]
        raise BlowUpError(f"non-finite state at t={t:.6g}, index {tuple(where)}", tuple(where), t)


def integrate(system: BoxSystem, q, p, h, n_steps: int, *, ceiling: float | None = BLOWUP_CEILING,
              check_every: int = 50, callback=None):
    """Run ``n_steps`` Stormer-Verlet steps of size ``h`` (scalar or broadcastable).

    Returns new ``(q, p)``.  ``callback(k, q, p)`` is called after every step
    when given.  Works with float and ``gmpy2`` object arrays.
    """
    q = np.array(q, copy=True)
    p = np.array(p, copy=True)
    if n_steps == 0:
        return q, p
    # overflow on the way to a blow-up is caught by the periodic checks below
    with np.errstate(over="ignore", invalid="ignore"):
        return _verlet(system, q, p, h, n_steps, ceiling, check_every, callback)


def _verlet(system, q, p, h, n_steps, ceiling, check_every, callback):
    wrap = system.model.wrap
    numeric = q.dtype != object
    half = h * 0.5
    f = system.force(q)
    for k in range(1, n_steps + 1):
        p += half * f
        q += h * p
        q = wrap(q)
        f = system.force(q)
        p += half * f
        if callback is not None:
            callback(k, q, p)
        if numeric and (k % check_every == 0 or k == n_steps):
            _check_finite(q, p, k)
            if ceiling is not None:
                e = system.energy_noninteracting(q, p)
                if np.max(e) > ceiling:
                    where = np.unravel_index(int(np.argmax(e)), e.shape)
                    raise BlowUpError(
                        f"per-site energy {np.max(e):.3g} exceeds {ceiling:.3g} after {k} steps "
                        f"(index {where}); reduce the step size", where, k)
    return q, p


def step(model: LatticeModel, cfg: Configuration, h: float) -> Configuration:
    """One Stormer-Verlet step (half kick, drift, half kick)."""
    if not h > 0:
        raise ValueError("step size must be positive")
    sys_ = _systems_cache(model, cfg.geom)
    q, p = integrate(sys_, cfg.q, cfg.p, h, 1, check_every=1)
    return Configuration(q, p, cfg.geom)


@dataclass
class Trajectory:
    final: Configuration
    times: list[float] = field(default_factory=list)
    snapshots: list[Configuration] = field(default_factory=list)
    energies: list[float] = field(default_factory=list)


def evolve(model: LatticeModel, cfg: Configuration, schedule: IntegratorSchedule, *,
           snapshot_every: int | None = None, ceiling: float | None = BLOWUP_CEILING) -> Trajectory:
    """Evolve under the severed dynamics; deterministic for given inputs.

    With ``snapshot_every=k`` the configuration and severed energy are
    recorded at t=0 and every ``k`` steps.
    """
    sys_ = _systems_cache(model, cfg.geom)
    n = schedule.n_steps
    h = schedule.signed_step
    traj = Trajectory(final=cfg.copy())
    if snapshot_every:
        traj.times.append(0.0)
        traj.snapshots.append(cfg.copy())
        traj.energies.append(float(sys_.hamiltonian(cfg.q, cfg.p)))

        def record(k, q, p):
            if k % snapshot_every == 0 or k == n:
                traj.times.append(k * h)
                traj.snapshots.append(Configuration(q.copy(), p.copy(), cfg.geom))
                traj.energies.append(float(sys_.hamiltonian(q, p)))
    else:
        record = None
    q, p = integrate(sys_, cfg.q, cfg.p, h, n, ceiling=ceiling, callback=record)
    traj.final = Configuration(q, p, cfg.geom)
    return traj


def time_reverse(cfg: Configuration) -> Configuration:
    """``(q, p) -> (q, -p)``."""
    return Configuration(cfg.q.copy(), -cfg.p, cfg.geom)


# --------------------------------------------------------------------------
# a priori bound
# --------------------------------------------------------------------------


def expm_scaled_squaring(M: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Matrix exponential by scaling, truncated Taylor series, and squaring."""
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    norm = np.abs(M).sum(axis=0).max() if n else 0.0
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    X = M / 2.0**s
    # squaring amplifies the relative Taylor error by about 2^s
    inner_tol = tol * 2.0**-s * 0.1
    term = np.eye(n)
    total = np.eye(n)
    for k in range(1, 200):
        term = term @ X / k
        total += term
        if np.abs(term).max() <= inner_tol * np.abs(total).max():
            break
    for _ in range(s):
        total = total @ total
    return total


@dataclass
class BoundCheck:
    holds: bool
    t: float
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def worst_ratio(self) -> float:
        return float(np.max(self.lhs / self.rhs))


@dataclass
class BandMatrix:
    """``A_ij = max(1, C1)`` on pairs at interaction distance <= 1 inside the box."""

    matrix: np.ndarray
    value: float
    shift: float
    geom: BoxGeometry
    model: LatticeModel
    tol: float = 1e-10

    @property
    def bandwidth(self) -> int:
        return self.model.range

    def expm(self, t: float) -> np.ndarray:
        return expm_scaled_squaring(t * self.matrix, self.tol)

    def op_norm_r(self, r: float = 1.0) -> float:
        """Operator norm on arrays weighted by ``(1 + |i|_inf)^-r``."""
        w = (1.0 + self.geom.norms()) ** r
        return float(np.max((np.abs(self.matrix) * w[None, :]).sum(axis=1) / w))

    def energies(self, cfg: Configuration) -> np.ndarray:
        sys_ = _systems_cache(self.model, cfg.geom)
        return sys_.energy_noninteracting(cfg.q, cfg.p) + self.shift

    def bound_check(self, cfg0: Configuration, cfg_t: Configuration, t: float,
                    rtol: float = 1e-8) -> BoundCheck:
        """Check ``E_i(t) <= sum_j [exp(tA)]_ij E_j(0)`` at every site."""
        rhs = self.expm(t) @ self.energies(cfg0)
        lhs = self.energies(cfg_t)
        return BoundCheck(bool(np.all(lhs <= rhs * (1 + rtol))), t, lhs, rhs)


def a_priori_matrix(model: LatticeModel, geom: BoxGeometry, report=None, *, C1: float | None = None,
                    shift: float | None = None, tol: float = 1e-10) -> BandMatrix:
    """Band matrix of the a priori energy estimate for the severed dynamics.

    ``C1`` and the on-site ``shift`` come from an assumption report unless
    given explicitly.
    """
    if C1 is None:
        if report is None:
            raise ValueError("need an AssumptionReport or an explicit C1")
        C1 = report.C1
    if shift is None:
        shift = report.shift if report is not None else 0.0
    value = max(1.0, float(C1))
    n = geom.n_sites
    A = np.eye(n) * value
    gens = model.neighbor_offsets
    if len(gens):
        nb = geom.sites[:, None, :] + gens[None, :, :]
        inside = geom.contains(nb)
        rows = np.repeat(np.arange(n)[:, None], len(gens), axis=1)[inside]
        A[rows, geom.index(nb[inside])] = value
    return BandMatrix(A, value, float(shift), geom, model, tol)


# --------------------------------------------------------------------------
# locality in the severing scale
# --------------------------------------------------------------------------


@dataclass
class LocalityTable:
    scales: list[int]
    gammas: list[int]
    err_q: list[float]
    err_p: list[float]
    t: float
    observer: tuple

    @property
    def err(self) -> list[float]:
        return [a + b for a, b in zip(self.err_q, self.err_p)]

    def rows(self):
        return list(zip(self.gammas, self.err_q, self.err_p, self.err))

    def strictly_decreasing(self, from_gamma: int = 2) -> bool:
        e = [v for g, v in zip(self.gammas, self.err) if g >= from_gamma]
        return all(b < a for a, b in zip(e, e[1:]))

    def ratio(self, g_hi: int, g_lo: int = 2) -> float:
        d = dict(zip(self.gammas, self.err))
        return d[g_hi] / d[g_lo]

    def log_concave(self, tol: float = 1e-9) -> bool:
        e = np.log([v for v in self.err if v > 0])
        return bool(np.all(np.diff(e, 2) <= tol)) if len(e) > 2 else True

    def ratio_slope(self, from_gamma: int = 2) -> float:
        """Slope of ``log(err(g+1)/err(g))`` against ``log g``.

        Exponential decay gives 0; a factorial law ``1/(2g)!`` gives about -2.
        """
        g = np.array([x for x in self.gammas if x >= from_gamma], dtype=float)
        e = np.log([v for x, v in zip(self.gammas, self.err) if x >= from_gamma])
        return float(np.polyfit(np.log(g[:-1]), np.diff(e), 1)[0])

    def to_dict(self) -> dict:
        return {"t": self.t, "observer": list(self.observer),
                "rows": [{"a": a, "gamma": g, "err_q": eq, "err_p": ep}
                         for a, g, eq, ep in zip(self.scales, self.gammas, self.err_q, self.err_p)]}


def _to_mpfr(x, bits):
    import gmpy2

    with gmpy2.context(gmpy2.get_context(), precision=bits):
        return np.asarray(np.frompyfunc(gmpy2.mpfr, 1, 1)(np.asarray(x, dtype=float)), dtype=object)


def _rms_sup(diff) -> float:
    """Sup over components, root mean square over samples."""
    d = np.abs(np.asarray(diff, dtype=float)).max(axis=-1)
    return float(np.sqrt(np.mean(d * d)))


def locality_experiment(model: LatticeModel, cfg: Configuration, scales, observer=None, *,
                        t: float = 1.0, h: float = 1e-3, precision_bits: int | None = None) -> LocalityTable:
    """Compare severed dynamics on nested boxes against the largest box.

    ``cfg`` lives on the reference box ``Lambda(b)``; each scale ``a < b``
    evolves the restriction of ``cfg`` and records the distance at the
    observer site after time ``t``.  A batched ``cfg`` (leading sample axis)
    gives the root-mean-square error over samples, which removes the
    sample-to-sample scatter of the boundary force that a single realization
    carries from one scale to the next.  ``precision_bits`` switches to
    multiprecision arithmetic (polynomial models only) so that errors far
    below double-precision rounding can be resolved.
    """
    big = cfg.geom
    observer = tuple(observer) if observer is not None else (0,) * model.nu
    scales = sorted(int(a) for a in scales)
    if scales and scales[-1] >= big.a:
        raise ValueError("scales must be smaller than the reference box")
    sched = IntegratorSchedule(h, t)
    n, hs = sched.n_steps, sched.signed_step

    def run(c: Configuration):
        sys_ = BoxSystem(model, c.geom)
        if precision_bits:
            import gmpy2

            with gmpy2.context(gmpy2.get_context(), precision=precision_bits):
                q, p = integrate(sys_, _to_mpfr(c.q, precision_bits), _to_mpfr(c.p, precision_bits),
                                 _to_mpfr(hs, precision_bits).item(), n)
        else:
            q, p = integrate(sys_, c.q, c.p, hs, n)
        k = c.geom.index(observer)
        return q[..., k, :], p[..., k, :]

    if not big.contains(observer):
        raise ValueError(f"observer {observer} not in the reference box")
    q_ref, p_ref = run(cfg)
    gammas, eq, ep = [], [], []
    for a in scales:
        g = box_sites(model.nu, a)
        if not g.contains(observer):
            raise ValueError(f"observer {observer} not in Lambda({a})")
        q, p = run(cfg.restrict(g))
        gam = gamma_to_complement(model, g)[g.index(observer)]
        gammas.append(int(gam) if np.isfinite(gam) else gam)
        eq.append(_rms_sup(q - q_ref))
        ep.append(_rms_sup(p - p_ref))
    return LocalityTable(scales, gammas, eq, ep, t, observer)


# --------------------------------------------------------------------------
# Poisson bracket and volume preservation
# --------------------------------------------------------------------------


def poisson_bracket_E0_H(model: LatticeModel, cfg: Configuration, site=None, *, isolated: bool = False):
    """``{E_i, H}`` at ``site`` (default: the origin).

    The box must contain every term through the site.  ``isolated=True``
    treats the box as the whole system, so severed terms simply do not exist.
    Batched configurations give an array over the leading axes.
    """
    site = tuple(site) if site is not None else (0,) * model.nu
    sys_ = _systems_cache(model, cfg.geom)
    k = cfg.geom.index(site)
    if not (isolated or sys_.complete[k]):
        raise ValueError(f"box too small: some interaction term containing {site} leaves the box")
    val = sys_.bracket(cfg.q, cfg.p)[..., k]
    return float(val) if np.ndim(val) == 0 else val


def step_jacobian_determinant(model: LatticeModel, cfg: Configuration, h: float, eps: float = 1e-6) -> float:
    """Determinant of the one-step map's Jacobian by central differences."""
    sys_ = _systems_cache(model, cfg.geom)
    x0 = np.concatenate([cfg.q.ravel(), cfg.p.ravel()])
    m = len(x0) // 2
    shape = cfg.q.shape

    def phi(x):
        q, p = integrate(sys_, x[:m].reshape(shape), x[m:].reshape(shape), h, 1, ceiling=None)
        return np.concatenate([q.ravel(), p.ravel()])

    J = np.empty((2 * m, 2 * m))
    for k in range(2 * m):
        e = np.zeros(2 * m)
        e[k] = eps
        J[:, k] = (phi(x0 + e) - phi(x0 - e)) / (2 * eps)
    return float(np.linalg.det(J))


# --------------------------------------------------------------------------
# snapshot files
# --------------------------------------------------------------------------


def write_snapshot(path, cfg: Configuration, *, model_hash: str, t: float, h: float, seed) -> None:
    """CSV snapshot: ``#``-prefixed header lines, then one row per site."""
    d = cfg.q.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(f"# model_hash={model_hash}\n# t={t!r}\n# h={h!r}\n# seed={seed}\n")
        fh.write(f"# nu={cfg.geom.nu}\n# a={cfg.geom.a}\n")
        w = csv.writer(fh)
        w.writerow(["site"] + [f"x{k}" for k in range(cfg.geom.nu)]
                   + [f"q{k}" for k in range(d)] + [f"p{k}" for k in range(d)])
        for k, s in enumerate(cfg.geom.sites):
            w.writerow([k, *s.tolist(), *map(repr, cfg.q[k].tolist()), *map(repr, cfg.p[k].tolist())])


def read_snapshot(path) -> tuple[Configuration, dict]:
    header: dict = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                header[key] = val
            else:
                rows.append(line)
    reader = csv.reader(rows)
    names = next(reader)
    data = np.array([[float(x) for x in r] for r in reader])
    nu, a = int(header["nu"]), int(header["a"])
    d = sum(1 for n in names if n.startswith("q"))
    geom = box_sites(nu, a)
    q = data[:, 1 + nu: 1 + nu + d]
    p = data[:, 1 + nu + d:]
    for key in ("t", "h"):
        header[key] = float(header[key])
    return Configuration(q, p, geom), header


def write_trajectory_manifest(path, traj: Trajectory, *, model: LatticeModel, schedule: IntegratorSchedule,
                              seed, snapshot_files=()) -> dict:
    manifest = {
        "model_hash": model.hash,
        "h": schedule.h,
        "t_end": schedule.t_end,
        "scheme": schedule.scheme,
        "seed": seed,
        "times": list(traj.times),
        "energies": list(traj.energies),
        "snapshots": [str(s) for s in snapshot_files],
    }
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
