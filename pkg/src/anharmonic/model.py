"""Lattice geometry, interaction families and assumption validators.

A model is a translation-invariant family of interactions on ``Z^nu``: one
on-site potential shared by every site, plus a list of finite-range
multi-body terms given by their offset sets.  Bodies are polynomial
(Euclidean single-site spaces) or trigonometric (torus single-site spaces),
so every potential is smooth by construction.

Array conventions used throughout the package: positions and momenta have
shape ``(..., n_sites, site_dim)``; leading axes are batch axes.  All
evaluators accept ``dtype=object`` arrays holding ``gmpy2.mpfr`` numbers for
polynomial models, which is how the high-precision locality runs work.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "PotentialSpec",
    "InteractionTerm",
    "LatticeModel",
    "BoxGeometry",
    "box_sites",
    "gamma_distance",
    "gamma_to_complement",
    "interior_boundary",
    "ProbePlan",
    "AssumptionResult",
    "AssumptionReport",
    "validate_assumptions",
    "polynomial_degree_check",
    "model_from_dict",
    "load_model",
    "save_model",
    "harmonic_chain",
    "fpu_chain",
    "quartic_lattice_2d",
    "rotator_chain",
    "REFERENCE_MODELS",
    "reference_model",
]


def _horner(coeffs: Sequence[float], x):
    out = x * 0 + coeffs[-1]
    for c in coeffs[-2::-1]:
        out = out * x + c
    return out


def _poly_deriv(coeffs: Sequence[float]) -> tuple[float, ...]:
    if len(coeffs) <= 1:
        return (0.0,)
    return tuple(k * c for k, c in enumerate(coeffs) if k > 0)


# --------------------------------------------------------------------------
# Potentials
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PotentialSpec:
    """On-site potential applied componentwise and summed over components.

    ``kind="polynomial"``: ``coeffs[k]`` multiplies ``q**k``; the degree must
    be even with a positive leading coefficient.
    ``kind="cosine"``: ``coeffs[h-1]`` is the amplitude ``A_h`` of
    ``A_h * (1 - cos(h q))``; only allowed on a torus.
    """

    kind: str
    coeffs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        if self.kind == "polynomial":
            c = self.coeffs
            while len(c) > 1 and c[-1] == 0.0:
                c = c[:-1]
            object.__setattr__(self, "coeffs", c)
            deg = len(c) - 1
            if deg < 2 or deg % 2 or c[-1] <= 0:
                raise ValueError(
                    "polynomial on-site potential needs even degree >= 2 "
                    f"and positive leading coefficient, got {self.coeffs}"
                )
        elif self.kind == "cosine":
            if not self.coeffs:
                raise ValueError("cosine potential needs at least one harmonic")
        else:
            raise ValueError(f"unknown potential kind {self.kind!r}")

    @property
    def degree(self) -> int | None:
        return len(self.coeffs) - 1 if self.kind == "polynomial" else None

    def _component_value(self, x):
        if self.kind == "polynomial":
            return _horner(self.coeffs, x)
        return sum(a * (1.0 - np.cos(h * x)) for h, a in enumerate(self.coeffs, 1))

    def _component_grad(self, x):
        if self.kind == "polynomial":
            return _horner(_poly_deriv(self.coeffs), x)
        return sum(a * h * np.sin(h * x) for h, a in enumerate(self.coeffs, 1))

    def _component_hess(self, x):
        if self.kind == "polynomial":
            return _horner(_poly_deriv(_poly_deriv(self.coeffs)), x)
        return sum(a * h * h * np.cos(h * x) for h, a in enumerate(self.coeffs, 1))

    def value(self, q):
        """``W(q)`` for ``q`` of shape ``(..., site_dim)``."""
        return self._component_value(q).sum(axis=-1)

    def grad(self, q):
        return self._component_grad(q)

    def hess_diag(self, q):
        """Diagonal of the Hessian (the potential is separable in components)."""
        return self._component_hess(q)


def _falling(e: int, k: int) -> int:
    out = 1
    for j in range(k):
        out *= e - j
    return out


@dataclass(frozen=True)
class InteractionTerm:
    """One multi-body interaction ``W_Delta`` in canonical offset form.

    ``offsets`` lists the sites of ``Delta`` relative to a base site, sorted
    lexicographically with the first offset equal to the zero vector.
    The body is applied to each coordinate component separately and summed:

    * ``monomials``: pairs ``(c, (e_0, ..., e_{k-1}))`` giving
      ``c * prod_m x_m**e_m``;
    * ``cosines``: pairs ``(A, (w_0, ..., w_{k-1}))`` giving
      ``A * (1 - cos(sum_m w_m x_m))`` with integer weights.
    """

    offsets: tuple[tuple[int, ...], ...]
    monomials: tuple[tuple[float, tuple[int, ...]], ...] = ()
    cosines: tuple[tuple[float, tuple[int, ...]], ...] = ()

    def __post_init__(self):
        offs = tuple(tuple(int(v) for v in o) for o in self.offsets)
        mons = tuple((float(c), tuple(int(e) for e in es)) for c, es in self.monomials)
        coss = tuple((float(a), tuple(int(w) for w in ws)) for a, ws in self.cosines)
        k = len(offs)
        if k < 2:
            raise ValueError("interaction terms need arity >= 2; use the on-site potential")
        if len(set(offs)) != k:
            raise ValueError(f"repeated offsets in {offs}")
        if len({len(o) for o in offs}) != 1:
            raise ValueError("offsets must share one dimension")
        for _, es in mons + coss:
            if len(es) != k:
                raise ValueError("body exponents/weights must have one entry per offset")
        if any(e < 0 for _, es in mons for e in es):
            raise ValueError("negative exponents are not smooth")
        # canonical form: sort slots lexicographically, shift minimum to zero
        order = sorted(range(k), key=lambda m: offs[m])
        base = offs[order[0]]
        offs = tuple(tuple(v - b for v, b in zip(offs[m], base)) for m in order)
        mons = tuple((c, tuple(es[m] for m in order)) for c, es in mons)
        coss = tuple((a, tuple(ws[m] for m in order)) for a, ws in coss)
        object.__setattr__(self, "offsets", offs)
        object.__setattr__(self, "monomials", mons)
        object.__setattr__(self, "cosines", coss)
        object.__setattr__(self, "_shift", base)

    @classmethod
    def pair_difference(cls, offset: Sequence[int], coeffs: Sequence[float]) -> "InteractionTerm":
        """Pair term ``sum_k coeffs[k] * (x_0 - x_offset)**k``."""
        nu = len(offset)
        return cls(offsets=((0,) * nu, tuple(offset)), monomials=_difference_monomials(coeffs))

    @classmethod
    def pair_cosine(cls, offset: Sequence[int], amplitudes: Sequence[float]) -> "InteractionTerm":
        """Pair term ``sum_h A_h (1 - cos(h (x_0 - x_offset)))``."""
        nu = len(offset)
        return cls(
            offsets=((0,) * nu, tuple(offset)),
            cosines=tuple((a, (h, -h)) for h, a in enumerate(amplitudes, 1)),
        )

    @property
    def shift(self) -> tuple[int, ...]:
        """Translation taking the canonical offsets back to the offsets given."""
        return self._shift

    @property
    def arity(self) -> int:
        return len(self.offsets)

    @property
    def diameter(self) -> int:
        o = np.asarray(self.offsets)
        return int(np.max(o.max(axis=0) - o.min(axis=0)))

    @property
    def degree(self) -> int:
        return max((sum(es) for _, es in self.monomials), default=0)

    @property
    def is_zero(self) -> bool:
        return all(c == 0 for c, _ in self.monomials) and all(a == 0 for a, _ in self.cosines)

    def _phase(self, x, ws):
        return sum(w * x[..., m, :] for m, w in enumerate(ws) if w)

    def value(self, x):
        """Body value for ``x`` of shape ``(..., arity, site_dim)``."""
        out = x[..., 0, :] * 0
        for c, es in self.monomials:
            term = c
            for m, e in enumerate(es):
                if e:
                    term = term * x[..., m, :] ** e
            out = out + term
        for a, ws in self.cosines:
            out = out + a * (1.0 - np.cos(self._phase(x, ws)))
        return out.sum(axis=-1)

    def _mono_deriv(self, x, orders):
        out = x[..., 0, :] * 0
        for c, es in self.monomials:
            fac = c
            for e, k in zip(es, orders):
                fac *= _falling(e, k)
            if fac == 0:
                continue
            term = fac
            for m, (e, k) in enumerate(zip(es, orders)):
                if e - k:
                    term = term * x[..., m, :] ** (e - k)
            out = out + term
        return out

    def grad(self, x):
        """Gradient, shape ``(..., arity, site_dim)``."""
        k = self.arity
        parts = []
        for m in range(k):
            orders = [0] * k
            orders[m] = 1
            g = self._mono_deriv(x, orders)
            for a, ws in self.cosines:
                if ws[m]:
                    g = g + a * ws[m] * np.sin(self._phase(x, ws))
            parts.append(g)
        return np.stack(parts, axis=-2)

    def hess(self, x):
        """Mixed second derivatives, shape ``(..., arity, arity, site_dim)``.

        Components do not mix, so the full Hessian is block diagonal in the
        component index and only the diagonal blocks are returned.
        """
        k = self.arity
        rows = []
        for m in range(k):
            row = []
            for n in range(k):
                orders = [0] * k
                orders[m] += 1
                orders[n] += 1
                h = self._mono_deriv(x, orders)
                for a, ws in self.cosines:
                    if ws[m] and ws[n]:
                        h = h + a * ws[m] * ws[n] * np.cos(self._phase(x, ws))
                row.append(h)
            rows.append(np.stack(row, axis=-2))
        return np.stack(rows, axis=-3)

    def to_dict(self) -> dict:
        d: dict = {"offsets": [list(o) for o in self.offsets]}
        if self.monomials:
            d["monomials"] = [[c, list(es)] for c, es in self.monomials]
        if self.cosines:
            d["cosines"] = [[a, list(ws)] for a, ws in self.cosines]
        return d


def _difference_monomials(coeffs):
    mons = []
    for k, c in enumerate(coeffs):
        if c == 0 or k == 0:
            continue
        for j in range(k + 1):
            mons.append((c * math.comb(k, j) * (-1) ** (k - j), (j, k - j)))
    return tuple(_merge(mons))


def _merge(mons):
    acc: dict[tuple[int, ...], float] = {}
    for c, es in mons:
        acc[es] = acc.get(es, 0.0) + c
    return [(c, es) for es, c in acc.items() if c != 0.0]


# --------------------------------------------------------------------------
# Model and geometry
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeModel:
    """Finite-range translation-invariant interaction family on ``Z^nu``.

    ``period`` is ``None`` for Euclidean single-site spaces ``R^site_dim``
    and a per-component tuple of periods for a torus.
    """

    nu: int
    site_dim: int
    onsite: PotentialSpec
    terms: tuple[InteractionTerm, ...] = ()
    range: int = 1
    period: tuple[float, ...] | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.nu < 1 or self.site_dim < 1 or self.range < 1:
            raise ValueError("nu, site_dim and range must be positive")
        if self.period is not None:
            per = self.period
            if np.isscalar(per):
                per = (float(per),) * self.site_dim
            per = tuple(float(x) for x in per)
            if len(per) != self.site_dim or min(per) <= 0:
                raise ValueError("torus needs one positive period per component")
            object.__setattr__(self, "period", per)
        torus = self.period is not None
        if self.onsite.kind == "cosine" and not torus:
            raise ValueError("cosine on-site potential requires a torus")
        if self.onsite.kind == "polynomial" and torus:
            raise ValueError("polynomial on-site potential is not periodic; use a Euclidean space")
        for t in self.terms:
            if len(t.offsets[0]) != self.nu:
                raise ValueError(f"term offsets {t.offsets} do not live in Z^{self.nu}")
            if t.diameter > self.range:
                raise ValueError(
                    f"term with offsets {t.offsets} has diameter {t.diameter} > range {self.range}"
                )
            if t.monomials and torus:
                raise ValueError("polynomial bodies are not allowed on a torus")

    @property
    def is_torus(self) -> bool:
        return self.period is not None

    @property
    def neighbor_offsets(self) -> np.ndarray:
        """Difference vectors ``j - i`` of sites sharing a nonzero term."""
        diffs = set()
        for t in self.terms:
            if t.is_zero:
                continue
            for a, b in itertools.permutations(t.offsets, 2):
                diffs.add(tuple(x - y for x, y in zip(a, b)))
        if not diffs:
            return np.zeros((0, self.nu), dtype=int)
        return np.array(sorted(diffs), dtype=int)

    def wrap(self, q):
        if self.period is None:
            return q
        return np.mod(q, np.asarray(self.period))

    def to_dict(self) -> dict:
        space = "euclidean" if self.period is None else {"torus": list(self.period)}
        return {
            "name": self.name,
            "nu": self.nu,
            "site_dim": self.site_dim,
            "space": space,
            "onsite": {"kind": self.onsite.kind, "coeffs": list(self.onsite.coeffs)},
            "terms": [t.to_dict() for t in self.terms],
            "range": self.range,
        }

    @property
    def hash(self) -> str:
        d = self.to_dict()
        d.pop("name")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class BoxGeometry:
    """The box ``Lambda(a) = (-a, a]^nu`` with lexicographic site order."""

    nu: int
    a: int
    sites: np.ndarray = field(repr=False, compare=False)

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def side(self) -> int:
        return 2 * self.a

    def contains(self, site) -> np.ndarray:
        s = np.asarray(site)
        return np.all((s > -self.a) & (s <= self.a), axis=-1)

    def index(self, site) -> np.ndarray:
        """Flat index of ``site`` (or an array of sites)."""
        s = np.asarray(site, dtype=int)
        if not np.all(self.contains(s)):
            raise IndexError(f"site {site} outside Lambda({self.a})")
        shifted = s + self.a - 1
        return np.ravel_multi_index(tuple(np.moveaxis(shifted, -1, 0)), (self.side,) * self.nu)

    @property
    def origin(self) -> int:
        return int(self.index((0,) * self.nu))

    def norms(self) -> np.ndarray:
        """ell-infinity norm ``|i|`` of every site."""
        return np.abs(self.sites).max(axis=1)


def box_sites(nu: int, a: int) -> BoxGeometry:
    """Enumerate ``Lambda(a)``; exactly ``2^nu a^nu`` sites."""
    if int(a) != a or a < 1:
        raise ValueError(f"box scale must be a positive integer, got {a}")
    if nu < 1:
        raise ValueError("nu must be positive")
    a = int(a)
    axis = np.arange(-a + 1, a + 1)
    grid = np.array(list(itertools.product(axis, repeat=nu)), dtype=int).reshape(-1, nu)
    return BoxGeometry(nu=nu, a=a, sites=grid)


# --------------------------------------------------------------------------
# Interaction distance
# --------------------------------------------------------------------------


def _hermite_rows(gens: np.ndarray) -> list[list[int]]:
    """Row-style echelon basis of the integer lattice spanned by ``gens``."""
    rows = [list(map(int, g)) for g in gens]
    nu = gens.shape[1] if len(gens) else 0
    basis = []
    for col in range(nu):
        live = [r for r in rows if r[col] != 0]
        rest = [r for r in rows if r[col] == 0]
        while len(live) > 1:
            live.sort(key=lambda r: abs(r[col]))
            piv = live[0]
            new = [piv]
            for r in live[1:]:
                f = r[col] // piv[col]
                r = [x - f * y for x, y in zip(r, piv)]
                (new if r[col] != 0 else rest).append(r)
            live = new
        if live:
            basis.append(live[0])
        rows = rest
    return basis


def _in_lattice(vec: Sequence[int], basis: list[list[int]]) -> bool:
    v = list(vec)
    for row in basis:
        col = next(k for k, x in enumerate(row) if x != 0)
        if v[col] % row[col]:
            return False
        f = v[col] // row[col]
        v = [x - f * y for x, y in zip(v, row)]
    return all(x == 0 for x in v)


def gamma_distance(model: LatticeModel, i, j) -> float:
    """Graph distance in the interaction graph (``math.inf`` if disconnected)."""
    i = tuple(int(x) for x in i)
    j = tuple(int(x) for x in j)
    if i == j:
        return 0
    gens = model.neighbor_offsets
    d = tuple(b - a for a, b in zip(i, j))
    if len(gens) == 0 or not _in_lattice(d, _hermite_rows(gens)):
        return math.inf
    # abelian Cayley graph: some geodesic stays within nu * D of the segment
    slack = model.nu * max(int(np.abs(gens).max()), 1)
    lo = [min(0, x) - slack for x in d]
    hi = [max(0, x) + slack for x in d]
    start = (0,) * model.nu
    seen = {start: 0}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for g in gens:
            nxt = tuple(int(c + s) for c, s in zip(cur, g))
            if nxt in seen or any(x < l or x > h for x, l, h in zip(nxt, lo, hi)):
                continue
            seen[nxt] = seen[cur] + 1
            if nxt == d:
                return seen[nxt]
            queue.append(nxt)
    return math.inf  # pragma: no cover - excluded by the lattice test


def gamma_to_complement(model: LatticeModel, geom: BoxGeometry) -> np.ndarray:
    """``gamma(i, Lambda^c)`` for every site of the box (``inf`` if isolated)."""
    gens = model.neighbor_offsets
    n = geom.n_sites
    dist = np.full(n, np.inf)
    if len(gens) == 0:
        return dist
    nb = geom.sites[:, None, :] + gens[None, :, :]
    inside = geom.contains(nb)
    dist[~np.all(inside, axis=1)] = 1
    flat = np.full(nb.shape[:2], -1)
    flat[inside] = geom.index(nb[inside])
    frontier = np.flatnonzero(dist == 1)
    level = 1
    while len(frontier):
        level += 1
        cand = flat[frontier].ravel()
        cand = np.unique(cand[cand >= 0])
        cand = cand[np.isinf(dist[cand])]
        dist[cand] = level
        frontier = cand
    return dist


def interior_boundary(model: LatticeModel, geom: BoxGeometry) -> np.ndarray:
    """Sites of the box interacting directly with its complement."""
    return geom.sites[gamma_to_complement(model, geom) == 1]


# --------------------------------------------------------------------------
# Assumption validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbePlan:
    """Random cloud of local configurations around the origin.

    Each entry of ``scales`` contributes ``n_per_scale`` Gaussian
    configurations with that standard deviation (uniform draws on a torus).
    ``shift`` is the additive constant put on the on-site potential for the
    pinning and domination constants; (P1) is always checked on the raw one.
    """

    n_per_scale: int = 1500
    scales: tuple[float, ...] = (0.01, 0.1, 1.0, 3.0, 10.0, 30.0)
    seed: int = 0
    shift: float = 1.0
    refine: bool = True
    growth_tolerance: float = 1.5


@dataclass
class AssumptionResult:
    passed: bool
    constant: float | tuple | None
    detail: str = ""


@dataclass
class AssumptionReport:
    results: dict[str, AssumptionResult]
    shift: float
    sampled: bool = True
    note: str = "sampled, not proven"

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def __getitem__(self, key: str) -> AssumptionResult:
        return self.results[key]

    @property
    def C1(self) -> float:
        return float(self.results["D1"].constant)

    def to_dict(self) -> dict:
        return {
            "shift": self.shift,
            "sampled": self.sampled,
            "note": self.note,
            "results": {
                k: {"passed": bool(r.passed), "constant": r.constant, "detail": r.detail}
                for k, r in self.results.items()
            },
        }


class _LocalWindow:
    """All placements of the model's terms inside a small window around 0."""

    def __init__(self, model: LatticeModel, radius: int, half_space: bool = False):
        self.model = model
        axis = range(-radius, radius + 1)
        sites = [s for s in itertools.product(axis, repeat=model.nu) if not half_space or s[0] >= 0]
        self.sites = np.array(sites, dtype=int)
        self.lookup = {s: k for k, s in enumerate(sites)}
        self.origin = self.lookup[(0,) * model.nu]
        self.placements = []  # (term, index array)
        for t in model.terms:
            if t.is_zero:
                continue
            idx = []
            for b in sites:
                slots = [tuple(x + y for x, y in zip(b, o)) for o in t.offsets]
                if all(s in self.lookup for s in slots):
                    idx.append([self.lookup[s] for s in slots])
            if idx:
                self.placements.append((t, np.array(idx, dtype=int)))
        nbr = {(0,) * model.nu} | {tuple(g) for g in model.neighbor_offsets}
        self.close = np.array([self.lookup[s] for s in nbr if s in self.lookup], dtype=int)


def _torus_norm(q, period):
    r = np.mod(q, period)
    return np.minimum(r, period - r)


def _site_norm(model, q):
    if model.is_torus:
        q = _torus_norm(q, np.asarray(model.period))
    return np.sqrt((q * q).sum(axis=-1))


def _local_ratios(model: LatticeModel, win: _LocalWindow, q: np.ndarray, shift: float) -> dict:
    """Per-configuration ratios for D1, D2, D3 and ss-like at the window origin."""
    # a potential failing (P1) can make the shifted denominators vanish
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return _local_ratios_raw(model, win, q, shift)


def _local_ratios_raw(model, win, q, shift):
    W = model.onsite.value(q)  # (N, n_sites)
    denom = (W[:, win.close] + shift).sum(axis=1)
    o = win.origin
    force = np.zeros(q.shape[:1] + q.shape[2:])
    energy = np.zeros(q.shape[0])
    d3_blocks: dict[int, np.ndarray] = {}
    onsite_h = model.onsite.hess_diag(q[:, o])
    d3_blocks[o] = onsite_h.copy()
    ss = np.zeros(q.shape[0])
    for t, idx in win.placements:
        x = q[:, idx]  # (N, P, arity, d)
        member = idx == o
        rows, slots = np.nonzero(member)
        if len(rows) == 0:
            continue
        vals = t.value(x[:, rows])  # (N, r)
        grads = t.grad(x[:, rows])  # (N, r, arity, d)
        hess = t.hess(x[:, rows])  # (N, r, arity, arity, d)
        energy += vals.sum(axis=1)
        for k, (r, m) in enumerate(zip(rows, slots)):
            force += grads[:, k, m]
            for n in range(t.arity):
                j = int(idx[r, n])
                blk = hess[:, k, m, n]
                d3_blocks[j] = d3_blocks.get(j, 0) + blk
            wsum = (W[:, idx[r]] + shift).sum(axis=1)
            ss = np.maximum(ss, np.abs(np.minimum(0.0, vals[:, k])) * t.arity / wsum)
    d1 = (force**2).sum(axis=1) / denom
    d2 = np.abs(energy) / denom
    d3 = np.max([np.abs(b).max(axis=1) for b in d3_blocks.values()], axis=0) / denom
    return {"D1": d1, "D2": d2, "D3": d3, "ss": ss}


def _probe_cloud(model, n_sites, plan, rng):
    clouds = []
    for s in plan.scales:
        shape = (plan.n_per_scale, n_sites, model.site_dim)
        if model.is_torus:
            clouds.append(rng.uniform(0, 1, shape) * np.asarray(model.period))
        else:
            clouds.append(s * rng.standard_normal(shape))
    return clouds


def _p2_constants(model: LatticeModel, shift: float, plan: ProbePlan):
    """Empirical ``a, b`` with ``max W over conv(L(z)) <= a z + b``."""
    if model.is_torus:
        grid = np.linspace(0, model.period[0], 4001)
        wmax = float(model.onsite._component_value(grid).max()) * model.site_dim
        return 0.0, wmax, "conv of a torus sublevel set is the whole torus"
    R = 10 * max(plan.scales)
    grid = np.linspace(-R, R, 200001)
    w = model.onsite._component_value(grid)
    wmin = float(w.min())
    d = model.site_dim
    zs = np.geomspace(max(wmin, 0) + 1e-3, float(min(w[0], w[-1])), 200)
    ratios, small = [], 0.0
    for z in zs:
        # componentwise bounding box of the sublevel set, an over-estimate of its hull
        budget = z - (d - 1) * wmin
        ok = np.flatnonzero(w <= budget)
        if len(ok) == 0:
            continue
        hull_max = float(w[ok[0] : ok[-1] + 1].max()) * d
        if z <= 1.0:
            small = max(small, hull_max)
        else:
            ratios.append(hull_max / z)
    a = max(ratios) if ratios else 1.0
    return a, max(small, a), "componentwise bounding box of sublevel sets on a grid"


def polynomial_degree_check(model: LatticeModel) -> AssumptionResult:
    """Exact degree comparison for the polynomial family (pair degree <= n+1)."""
    if model.onsite.kind != "polynomial":
        return AssumptionResult(True, None, "non-polynomial family: compact torus")
    n = model.onsite.degree // 2
    worst = max((t.degree for t in model.terms), default=0)
    return AssumptionResult(
        worst <= n + 1, (2 * n, worst), f"on-site degree {2 * n}, max body degree {worst} <= {n + 1}"
    )


def validate_assumptions(model: LatticeModel, probe: ProbePlan | None = None) -> AssumptionReport:
    """Sample the structural assumptions on a probe cloud.

    Constants are maxima over the probe (optionally refined by local
    ascent), hence lower bounds on the true constants.  Domination
    assumptions fail when their ratio keeps growing with the probe scale.
    """
    plan = probe or ProbePlan()
    rng = np.random.default_rng(plan.seed)
    shift = float(plan.shift)
    results: dict[str, AssumptionResult] = {}

    # single-site checks on a dense grid plus the cloud
    if model.is_torus:
        grid = np.linspace(0, model.period[0], 4001)
    else:
        R = max(plan.scales)
        grid = np.concatenate([np.linspace(-R, R, 40001), [0.0]])
    w1 = model.onsite._component_value(grid)
    pts = np.zeros((len(grid), model.site_dim))
    pts[:, 0] = grid
    if model.site_dim > 1:
        pts[:, 1:] = grid[:, None] * 0.5
    single = np.concatenate([pts, *(c[:, 0] for c in _probe_cloud(model, 1, plan, rng))])
    W = model.onsite.value(single)
    if not np.all(np.isfinite(W)) or not np.all(np.isfinite(w1)):
        raise ValueError("non-finite on-site potential on probe points")
    wmin = float(W.min())
    results["P1"] = AssumptionResult(wmin >= -1e-12, wmin, "minimum of the raw on-site potential")
    a, b, how = _p2_constants(model, shift, plan)
    results["P2"] = AssumptionResult(bool(np.isfinite(a) and np.isfinite(b)), (a, b), how)
    qn = _site_norm(model, single)
    c0 = qn / (W + shift)
    results["P3"] = AssumptionResult(
        bool(np.all(W + shift > 0)) and np.isfinite(c0.max()), float(c0.max()),
        f"|q| <= C0 (W + {shift})",
    )

    # multi-site domination constants, sampled on a full and a half-space window
    radius = 2 * model.range
    windows = [_LocalWindow(model, radius), _LocalWindow(model, radius, half_space=True)]
    per_scale: dict[str, list[float]] = {k: [] for k in ("D1", "D2", "D3", "ss")}
    best: dict[str, tuple[float, np.ndarray, _LocalWindow]] = {}
    for win in windows:
        clouds = _probe_cloud(model, len(win.sites), plan, np.random.default_rng(plan.seed + 1))
        for si, q in enumerate(clouds):
            r = _local_ratios(model, win, q, shift)
            for k, v in r.items():
                if not np.all(np.isfinite(v)):
                    raise ValueError(f"non-finite {k} ratio on probe points")
                m = float(v.max())
                if len(per_scale[k]) <= si:
                    per_scale[k].append(m)
                else:
                    per_scale[k][si] = max(per_scale[k][si], m)
                if k not in best or m > best[k][0]:
                    best[k] = (m, q[int(np.argmax(v))], win)
    if plan.refine and not model.is_torus:
        from scipy.optimize import minimize

        for k in ("D1", "D2", "D3"):
            m, q0, win = best[k]
            shape = q0.shape

            def neg(x, k=k, win=win):
                return -float(_local_ratios(model, win, x.reshape((1,) + shape), shift)[k][0])

            with np.errstate(invalid="ignore", over="ignore"):
                res = minimize(neg, q0.ravel(), method="Nelder-Mead",
                               options={"maxfev": 1500, "xatol": 1e-10, "fatol": 1e-12})
            if np.isfinite(res.fun) and -res.fun > m:
                best[k] = (-float(res.fun), res.x.reshape(shape), win)
    labels = {"D1": "|interaction force|^2 <= C1 sum W", "D2": "|interaction energy| <= C2 sum W",
              "D3": "|second derivatives| <= C3 sum W"}
    for k in ("D1", "D2", "D3"):
        seq = per_scale[k]
        growth = seq[-1] / max(seq[-2], 1e-300) if len(seq) > 1 else 1.0
        bounded = model.is_torus or growth < plan.growth_tolerance
        results[k] = AssumptionResult(bool(bounded), best[k][0],
                                      f"{labels[k]}; growth over last scale {growth:.3g}")
    worst_ss = best["ss"][0]
    results["ss-like"] = AssumptionResult(worst_ss < 1.0, 1.0 - worst_ss,
                                          "epsilon in |min(0, W_D)| <= (1-eps)/#D sum W")
    results["polynomial-degree"] = polynomial_degree_check(model)
    return AssumptionReport(results=results, shift=shift)


# --------------------------------------------------------------------------
# JSON model files
# --------------------------------------------------------------------------


def model_from_dict(d: dict) -> LatticeModel:
    """Build a model from its JSON description.

    Schema::

        {"nu": 1, "site_dim": 1, "range": 1,
         "space": "euclidean" | {"torus": period or [periods]},
         "onsite": {"kind": "polynomial" | "cosine", "coeffs": [...]},
         "terms": [{"offsets": [[0], [1]],
                    "difference": [c0, c1, c2, ...]        # pair, polynomial in x0 - x1
                    | "monomials": [[c, [e0, e1, ...]], ...]
                    | "cosines": [[A, [w0, w1, ...]], ...]}]}
    """
    try:
        nu, site_dim, rng_ = int(d["nu"]), int(d["site_dim"]), int(d["range"])
        space = d.get("space", "euclidean")
        period = None
        if isinstance(space, dict):
            period = space["torus"]
        elif space != "euclidean":
            raise ValueError(f"unknown space {space!r}")
        onsite = PotentialSpec(d["onsite"]["kind"], tuple(d["onsite"]["coeffs"]))
        terms = []
        for td in d.get("terms", []):
            offs = [tuple(o) for o in td["offsets"]]
            if any(len(o) != nu for o in offs):
                raise ValueError(f"offsets {offs} not in Z^{nu}")
            o = np.asarray(offs)
            if np.max(o.max(axis=0) - o.min(axis=0)) > rng_:
                raise ValueError(f"offsets {offs} exceed the declared range {rng_}")
            if "difference" in td:
                if len(offs) != 2:
                    raise ValueError("difference bodies need exactly two offsets")
                t = InteractionTerm(tuple(offs), _difference_monomials(td["difference"]))
            else:
                t = InteractionTerm(
                    offsets=tuple(offs),
                    monomials=tuple((c, tuple(es)) for c, es in td.get("monomials", [])),
                    cosines=tuple((a, tuple(ws)) for a, ws in td.get("cosines", [])),
                )
            terms.append(t)
    except KeyError as exc:
        raise ValueError(f"model description missing field {exc}") from None
    return LatticeModel(nu=nu, site_dim=site_dim, onsite=onsite, terms=tuple(terms),
                        range=rng_, period=period, name=d.get("name", ""))


def load_model(path_or_name) -> LatticeModel:
    """Load a model from a JSON file, or build a shipped reference model by name."""
    if isinstance(path_or_name, str) and path_or_name in REFERENCE_MODELS:
        return REFERENCE_MODELS[path_or_name]()
    with open(path_or_name) as fh:
        return model_from_dict(json.load(fh))


def save_model(model: LatticeModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


# --------------------------------------------------------------------------
# Reference models
# --------------------------------------------------------------------------


def harmonic_chain(kappa: float = 1.0) -> LatticeModel:
    """``W0 = q^2/2``, nearest-neighbour pair ``kappa (q_i - q_j)^2 / 4``."""
    return LatticeModel(
        nu=1, site_dim=1, onsite=PotentialSpec("polynomial", (0.0, 0.0, 0.5)),
        terms=(InteractionTerm.pair_difference((1,), (0.0, 0.0, kappa / 4)),),
        range=1, name="harmonic-chain",
    )


def fpu_chain(quartic: float = 0.25, kappa: float = 1.0, cubic: float = 0.0) -> LatticeModel:
    """Quartic pinning ``q^2/2 + quartic q^4`` with pair ``kappa/2 dq^2 + cubic dq^3``."""
    return LatticeModel(
        nu=1, site_dim=1, onsite=PotentialSpec("polynomial", (0.0, 0.0, 0.5, 0.0, quartic)),
        terms=(InteractionTerm.pair_difference((1,), (0.0, 0.0, kappa / 2, cubic)),),
        range=1, name="fpu-chain" if cubic == 0 else "fpu-alpha-chain",
    )


def quartic_lattice_2d(kappa: float = 0.5, three_body: float = 0.05) -> LatticeModel:
    """Square lattice, quartic pinning, nearest-neighbour pairs and a small L-shaped triple."""
    terms = [
        InteractionTerm.pair_difference((1, 0), (0.0, 0.0, kappa / 2)),
        InteractionTerm.pair_difference((0, 1), (0.0, 0.0, kappa / 2)),
    ]
    if three_body:
        terms.append(InteractionTerm(offsets=((0, 0), (0, 1), (1, 0)),
                                     monomials=((three_body, (1, 1, 1)),)))
    return LatticeModel(
        nu=2, site_dim=1, onsite=PotentialSpec("polynomial", (0.0, 0.0, 0.5, 0.0, 0.25)),
        terms=tuple(terms), range=1, name="quartic-lattice-2d",
    )


def rotator_chain(coupling: float = 1.0, pinning: float = 0.5) -> LatticeModel:
    """Rotators on the circle: ``pinning (1 - cos q)`` and ``coupling (1 - cos(q_i - q_j))``."""
    return LatticeModel(
        nu=1, site_dim=1, onsite=PotentialSpec("cosine", (pinning,)),
        terms=(InteractionTerm.pair_cosine((1,), (coupling,)),),
        range=1, period=(2 * math.pi,), name="rotator-chain",
    )


REFERENCE_MODELS = {
    "harmonic-chain": harmonic_chain,
    "fpu-chain": fpu_chain,
    "quartic-lattice-2d": quartic_lattice_2d,
    "rotator-chain": rotator_chain,
}


def reference_model(name: str) -> LatticeModel:
    try:
        return REFERENCE_MODELS[name]()
    except KeyError:
        raise ValueError(f"unknown reference model {name!r}; known: {sorted(REFERENCE_MODELS)}") from None
