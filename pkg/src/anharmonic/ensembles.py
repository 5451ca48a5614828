"""Monte-Carlo surrogates for lattice states.

An :class:`Ensemble` stores ``N`` configurations on one box as arrays of
shape ``(N, n_sites, site_dim)``.  Random numbers come from counter-based
Philox streams, one per chunk of 1024 samples, so results do not depend on
how the work is split across threads.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dynamics import BoxSystem, Configuration, IntegratorSchedule, integrate, _systems_cache
from .model import BoxGeometry, LatticeModel, box_sites, gamma_to_complement

__all__ = [
    "CHUNK",
    "Estimate",
    "Ensemble",
    "ProductGaussian",
    "ProductCustom",
    "GaussianBlock",
    "GibbsFiniteVolume",
    "SamplerError",
    "Observable",
    "standard_panel",
    "chunk_rng",
    "sample",
    "pushforward",
    "time_reverse_ensemble",
    "interior_sites",
    "moment_M",
    "membership_fraction",
    "periodize",
    "time_average",
    "expect",
    "observable_distance",
    "bootstrap_stderr",
    "save_ensemble",
    "load_ensemble",
    "export_csv",
]

CHUNK = 1024
GENERATOR_ID = "philox-chunk1024"


def chunk_rng(seed: int, chunk: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, stream, chunk)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(stream, chunk))))


def _chunks(n: int):
    return [(c, c * CHUNK, min((c + 1) * CHUNK, n)) for c in range(math.ceil(n / CHUNK))]


def _map_chunks(fn, n: int, threads: int = 1):
    """Apply ``fn(chunk_id, lo, hi)`` to every chunk; order of results is fixed."""
    jobs = _chunks(n)
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(lambda j: fn(*j), jobs))
    return [fn(*j) for j in jobs]


@dataclass
class Estimate:
    """Estimator output: ``{value, stderr, N, seed}`` plus the method used."""

    value: float
    stderr: float
    N: int
    seed: int | None = None
    method: str = "MC"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"value": self.value, "stderr": self.stderr, "N": self.N, "seed": self.seed, "method": self.method}
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def within(self, other: float | "Estimate", nsigma: float = 3.0) -> bool:
        ov, oe = (other.value, other.stderr) if isinstance(other, Estimate) else (other, 0.0)
        return abs(self.value - ov) <= nsigma * math.hypot(self.stderr, oe)


@dataclass
class Ensemble:
    """``N`` configurations on a common box with uniform weights."""

    q: np.ndarray
    p: np.ndarray
    geom: BoxGeometry
    model_hash: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.q.ndim != 3 or self.q.shape != self.p.shape:
            raise ValueError("ensemble arrays must have shape (N, n_sites, site_dim)")
        if self.q.shape[0] < 1:
            raise ValueError("an ensemble needs at least one sample")
        if self.q.shape[1] != self.geom.n_sites:
            raise ValueError("ensemble arrays do not match the box")
        self.meta.setdefault("t", 0.0)
        self.meta["N"] = self.N

    @property
    def N(self) -> int:
        return self.q.shape[0]

    @property
    def site_dim(self) -> int:
        return self.q.shape[2]

    def __len__(self) -> int:
        return self.N

    def __getitem__(self, k: int) -> Configuration:
        return Configuration(self.q[k], self.p[k], self.geom)

    @property
    def samples(self) -> list[Configuration]:
        return [self[k] for k in range(self.N)]

    def as_configuration(self) -> Configuration:
        return Configuration(self.q, self.p, self.geom)

    def replace(self, q=None, p=None, **meta) -> "Ensemble":
        m = dict(self.meta)
        m.update(meta)
        return Ensemble(self.q if q is None else q, self.p if p is None else p, self.geom, self.model_hash, m)


# --------------------------------------------------------------------------
# state specifications
# --------------------------------------------------------------------------


def _site_array(x, geom: BoxGeometry, d: int) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return np.broadcast_to(a, (geom.n_sites, d))


@dataclass
class ProductGaussian:
    """Independent Gaussian ``q_i`` and ``p_i``; per-site parameters allowed.

    Scalar parameters give a translation-invariant product state.  Arrays of
    length ``n_sites`` give a site-dependent (non-invariant) state.
    """

    geom: BoxGeometry
    q_var: float | np.ndarray = 1.0
    p_var: float | np.ndarray = 1.0
    q_mean: float | np.ndarray = 0.0
    p_mean: float | np.ndarray = 0.0
    site_dim: int = 1
    kind = "ProductGaussian"

    def __post_init__(self):
        if np.any(np.asarray(self.q_var) <= 0) or np.any(np.asarray(self.p_var) <= 0):
            raise ValueError("variances must be positive")

    @property
    def translation_invariant(self) -> bool:
        return all(np.ndim(x) == 0 for x in (self.q_var, self.p_var, self.q_mean, self.p_mean))

    def draw(self, rng: np.random.Generator, m: int):
        g, d = self.geom, self.site_dim
        shape = (m, g.n_sites, d)
        qs, ps = np.sqrt(_site_array(self.q_var, g, d)), np.sqrt(_site_array(self.p_var, g, d))
        q = _site_array(self.q_mean, g, d) + qs * rng.standard_normal(shape)
        p = _site_array(self.p_mean, g, d) + ps * rng.standard_normal(shape)
        return q, p


@dataclass
class ProductCustom:
    """Product state with single-coordinate position density ``exp(log_density)``.

    Positions are drawn by rejection from ``N(0, proposal_scale^2)``, or
    from the uniform law when ``period`` is set (torus coordinates); the
    envelope constant is found on a fine grid over ``+-grid_halfwidth``
    proposal widths (one period) and inflated by ``safety``.  Momenta are
    ``N(0, p_var)``.
    """

    geom: BoxGeometry
    log_density: Callable[[np.ndarray], np.ndarray]
    proposal_scale: float = 1.0
    p_var: float = 1.0
    site_dim: int = 1
    grid_halfwidth: float = 12.0
    safety: float = 1.05
    period: float | None = None
    kind = "ProductCustom"
    translation_invariant = True

    def __post_init__(self):
        if self.proposal_scale <= 0 or self.p_var <= 0:
            raise ValueError("scales must be positive")
        s = self.proposal_scale
        if self.period is not None:
            x = np.linspace(0.0, self.period, 200001)
            lr = self.log_density(x)
        else:
            x = np.linspace(-self.grid_halfwidth * s, self.grid_halfwidth * s, 200001)
            lr = self.log_density(x) + 0.5 * (x / s) ** 2
        if not np.all(np.isfinite(lr[np.isfinite(self.log_density(x))])):
            raise ValueError("log density is not finite on the envelope grid")
        self._log_m = float(np.max(lr)) + math.log(self.safety)

    def draw(self, rng: np.random.Generator, m: int):
        n = m * self.geom.n_sites * self.site_dim
        s = self.proposal_scale
        out = np.empty(0)
        while out.size < n:
            size = max(2 * (n - out.size), 64)
            if self.period is not None:
                x = self.period * rng.random(size)
                lr = self.log_density(x) - self._log_m
            else:
                x = s * rng.standard_normal(size)
                lr = self.log_density(x) + 0.5 * (x / s) ** 2 - self._log_m
            if np.any(lr > 1e-12):
                raise ValueError("rejection envelope violated; widen the grid or the proposal")
            out = np.concatenate([out, x[np.log(rng.random(x.size)) < lr]])
        q = out[:n].reshape(m, self.geom.n_sites, self.site_dim)
        p = math.sqrt(self.p_var) * rng.standard_normal(q.shape)
        return q, p

    @classmethod
    def onsite_gibbs(cls, model: LatticeModel, geom: BoxGeometry, beta: float = 1.0, **kw) -> "ProductCustom":
        """Product of single-site Gibbs factors ``exp(-beta (p^2/2 + W0(q)))``."""
        c2 = model.onsite._component_hess(np.zeros(1))[0] if model.onsite.kind == "polynomial" else 1.0
        scale = 1.0 / math.sqrt(beta * max(float(c2), 0.5))

        def logpdf(x, _w=model.onsite._component_value):
            return -beta * _w(x)

        if model.is_torus:
            if len(set(model.period)) != 1:
                raise ValueError("onsite_gibbs needs equal periods on every component")
            kw.setdefault("period", model.period[0])
        return cls(geom, logpdf, proposal_scale=scale, p_var=1.0 / beta, site_dim=model.site_dim, **kw)


@dataclass
class GaussianBlock:
    """Centered (or shifted) Gaussian on the whole box phase space.

    ``cov`` is over the flattened vector ``(q.ravel(), p.ravel())`` of length
    ``2 n_sites site_dim``.
    """

    geom: BoxGeometry
    cov: np.ndarray
    mean: np.ndarray | None = None
    site_dim: int = 1
    kind = "GaussianBlock"
    translation_invariant = False

    def __post_init__(self):
        m = 2 * self.geom.n_sites * self.site_dim
        self.cov = np.asarray(self.cov, dtype=float)
        if self.cov.shape != (m, m):
            raise ValueError(f"covariance must be {m}x{m}")
        self._chol = np.linalg.cholesky(self.cov)  # raises if not positive definite

    def draw(self, rng: np.random.Generator, m: int):
        k = self.cov.shape[0]
        x = rng.standard_normal((m, k)) @ self._chol.T
        if self.mean is not None:
            x = x + np.asarray(self.mean)
        half = k // 2
        shape = (m, self.geom.n_sites, self.site_dim)
        return x[:, :half].reshape(shape), x[:, half:].reshape(shape)


class SamplerError(ValueError):
    """MCMC could not be tuned to a usable acceptance rate."""


@dataclass
class GibbsFiniteVolume:
    """Finite-volume Gibbs state ``exp(-beta H_box)`` of the severed Hamiltonian.

    Momenta are exact Gaussians ``N(0, 1/beta)``.  Positions come from
    Metropolis-adjusted Langevin chains with a tamed drift run in parallel; the step is tuned
    during burn-in towards ``target`` acceptance and the chains are thinned by
    an estimate of the integrated autocorrelation time of the potential.
    """

    model: LatticeModel
    geom: BoxGeometry
    beta: float = 1.0
    n_chains: int = 512
    burn_in: int = 10_000
    thin: int | None = None
    step: float | None = None
    target: tuple[float, float] = (0.55, 0.60)
    kind = "GibbsFiniteVolume"
    translation_invariant = False

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.n_chains < 1 or self.burn_in < 0:
            raise ValueError("need at least one chain and a nonnegative burn-in")
        self.diagnostics: dict = {}

    @property
    def site_dim(self) -> int:
        return self.model.site_dim

    def _min_image(self, x):
        per = self.model.period
        if per is None:
            return x
        per = np.asarray(per)
        return x - per * np.round(x / per)

    def run_chains(self, rng: np.random.Generator, n_chains: int, n_keep: int):
        """Return positions ``(n_keep * n_chains, n_sites, d)`` and diagnostics."""
        sys_ = _systems_cache(self.model, self.geom)
        beta = self.beta
        n, d = self.geom.n_sites, self.site_dim
        wrap = self.model.wrap
        if self.model.is_torus:
            q = rng.random((n_chains, n, d)) * np.asarray(self.model.period)
        else:
            c2 = max(float(self.model.onsite._component_hess(np.zeros(1))[0]), 0.1)
            q = rng.standard_normal((n_chains, n, d)) / math.sqrt(beta * c2)
        eps = self.step if self.step is not None else 0.5 / math.sqrt(beta * (n * d) ** (1 / 3))
        logp = -beta * sys_.potential(q)
        g = beta * sys_.force(q)

        def tame(g, eps):
            # tamed drift keeps chains in steep tails from freezing
            norm = np.sqrt((g**2).sum(axis=(-2, -1), keepdims=True))
            return g / (1.0 + eps * norm)

        def sweep(q, logp, g, eps):
            xi = rng.standard_normal(q.shape)
            gt = tame(g, eps)
            prop = wrap(q + 0.5 * eps**2 * gt + eps * xi)
            lp2 = -beta * sys_.potential(prop)
            g2 = beta * sys_.force(prop)
            fwd = self._min_image(prop - q - 0.5 * eps**2 * gt)
            bwd = self._min_image(q - prop - 0.5 * eps**2 * tame(g2, eps))
            log_a = lp2 - logp - ((bwd**2).sum(axis=(-2, -1)) - (fwd**2).sum(axis=(-2, -1))) / (2 * eps**2)
            acc = np.log(rng.random(q.shape[0])) < log_a
            acc &= np.isfinite(lp2)
            q = np.where(acc[:, None, None], prop, q)
            logp = np.where(acc, lp2, logp)
            g = np.where(acc[:, None, None], g2, g)
            return q, logp, g, acc.mean()

        lo, hi = self.target
        mid = 0.5 * (lo + hi)
        window, acc_sum, rates = 50, 0.0, []
        for k in range(1, self.burn_in + 1):
            q, logp, g, a = sweep(q, logp, g, eps)
            acc_sum += a
            if k % window == 0:
                rate = acc_sum / window
                rates.append(rate)
                acc_sum = 0.0
                if self.step is None and not (lo <= rate <= hi):
                    # damped Robbins-Monro step on log eps
                    eps *= math.exp(np.clip(2.0 * (rate - mid), -0.5, 0.5) / math.sqrt(1 + k / (20 * window)))
        # pilot run: acceptance and autocorrelation at the frozen step
        pilot = max(200, 4 * window)
        trace = np.empty((pilot, q.shape[0]))
        acc_p = 0.0
        for k in range(pilot):
            q, logp, g, a = sweep(q, logp, g, eps)
            acc_p += a
            trace[k] = logp
        acc_p /= pilot
        if acc_p < 0.10:
            raise SamplerError(f"MALA acceptance {acc_p:.3f} < 0.10 after tuning (step {eps:.3g})")
        tau = integrated_autocorr(trace)
        thin = self.thin if self.thin is not None else max(1, int(math.ceil(2 * tau)))
        out = np.empty((n_keep,) + q.shape)
        acc_s = 0.0
        for k in range(n_keep):
            for _ in range(thin):
                q, logp, g, a = sweep(q, logp, g, eps)
                acc_s += a
            out[k] = q
        diag = {"step": eps, "acceptance": acc_s / max(n_keep * thin, 1), "pilot_acceptance": acc_p,
                "tau_int": tau, "thin": thin, "burn_in": self.burn_in, "n_chains": int(q.shape[0])}
        return out.reshape((-1,) + q.shape[1:]), diag


def integrated_autocorr(trace: np.ndarray, c: float = 5.0) -> float:
    """Integrated autocorrelation time of a ``(T, chains)`` trace (Sokal window)."""
    x = trace - trace.mean(axis=0)
    T = x.shape[0]
    f = np.fft.rfft(x, n=2 * T, axis=0)
    acf = np.fft.irfft(f * np.conj(f), axis=0)[:T].mean(axis=1)
    if acf[0] <= 0:
        return 1.0
    rho = acf / acf[0]
    tau = 1.0
    for w in range(1, T):
        tau = 1.0 + 2.0 * rho[1:w + 1].sum()
        if w >= c * tau:
            break
    return max(float(tau), 1.0)


def sample(spec, n: int, seed: int, *, model: LatticeModel | None = None, threads: int = 1) -> Ensemble:
    """Draw ``n`` samples of ``spec``; deterministic in ``seed``.

    Product and block specs are drawn per 1024-sample chunk from its own
    stream.  The Gibbs spec runs its chains in chunks of the same size.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    if isinstance(spec, GibbsFiniteVolume):
        model = spec.model
        n_chains = min(spec.n_chains, n)
        per_chain = math.ceil(n / n_chains)

        def chunk(c, lo, hi):
            return spec.run_chains(chunk_rng(seed, c), hi - lo, per_chain)

        parts = _map_chunks(chunk, n_chains, threads)
        shape = (spec.geom.n_sites, spec.site_dim)
        # sample index = keep * n_chains + chain
        q = np.concatenate([pq.reshape(per_chain, -1, *shape) for pq, _ in parts], axis=1)
        q = q.reshape(-1, *shape)[:n]
        diag = parts[0][1]
        diag["acceptance"] = float(np.mean([d["acceptance"] for _, d in parts]))
        p_rng = chunk_rng(seed, 0, stream=1)
        p = p_rng.standard_normal(q.shape) / math.sqrt(spec.beta)
        spec.diagnostics = diag
        meta = {"seed": seed, "generator": GENERATOR_ID, "kind": spec.kind, "beta": spec.beta, "sampler": diag}
    else:
        parts = _map_chunks(lambda c, lo, hi: spec.draw(chunk_rng(seed, c), hi - lo), n, threads)
        q = np.concatenate([a for a, _ in parts])
        p = np.concatenate([b for _, b in parts])
        meta = {"seed": seed, "generator": GENERATOR_ID, "kind": spec.kind}
        if model is not None and model.is_torus:
            q = model.wrap(q)
    meta["translation_invariant"] = bool(getattr(spec, "translation_invariant", False))
    return Ensemble(q, p, spec.geom, model.hash if model is not None else None, meta)


# --------------------------------------------------------------------------
# transport of ensembles
# --------------------------------------------------------------------------


def _check_model(ens: Ensemble, model: LatticeModel):
    if ens.model_hash is not None and ens.model_hash != model.hash:
        raise ValueError("ensemble was built for a different model")


def pushforward(ens: Ensemble, model: LatticeModel, schedule: IntegratorSchedule, *, threads: int = 1) -> Ensemble:
    """Evolve every sample by the severed flow of the ensemble's box."""
    _check_model(ens, model)
    sys_ = _systems_cache(model, ens.geom)
    n, h = schedule.n_steps, schedule.signed_step

    def chunk(c, lo, hi):
        return integrate(sys_, ens.q[lo:hi], ens.p[lo:hi], h, n)

    parts = _map_chunks(chunk, ens.N, threads)
    q = np.concatenate([a for a, _ in parts])
    p = np.concatenate([b for _, b in parts])
    out = ens.replace(q, p, t=ens.meta.get("t", 0.0) + schedule.t_end)
    out.model_hash = model.hash
    return out


def time_reverse_ensemble(ens: Ensemble) -> Ensemble:
    return ens.replace(p=-ens.p)


def time_average(ens: Ensemble, model: LatticeModel, T: float, n_times: int = 1, *, h: float = 1e-2,
                 seed: int = 0, threads: int = 1) -> Ensemble:
    """Stratified realization of the time average over ``[0, T]``.

    Every sample is replicated ``n_times`` times and each copy is evolved to
    its own time, drawn uniformly from one of ``N n_times`` equal strata of
    ``[0, T]``.  Each copy uses ``ceil(T/h)`` steps of size ``t_k / n_steps``,
    so all copies advance in one batch.
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    _check_model(ens, model)
    q0 = np.repeat(ens.q, n_times, axis=0)
    p0 = np.repeat(ens.p, n_times, axis=0)
    m = q0.shape[0]
    rng = chunk_rng(seed, 0, stream=2)
    times = T * (np.arange(m) + rng.random(m)) / m
    times = times[rng.permutation(m)]
    n_steps = max(int(math.ceil(T / h - 1e-9)), 0) if T > 0 else 0
    sys_ = _systems_cache(model, ens.geom)
    if n_steps == 0:
        q, p = q0.copy(), p0.copy()
    else:
        steps = times / n_steps

        def chunk(c, lo, hi):
            return integrate(sys_, q0[lo:hi], p0[lo:hi], steps[lo:hi, None, None], n_steps)

        parts = _map_chunks(chunk, m, threads)
        q = np.concatenate([a for a, _ in parts])
        p = np.concatenate([b for _, b in parts])
    out = Ensemble(q, p, ens.geom, model.hash, dict(ens.meta))
    out.meta.update(t=ens.meta.get("t", 0.0) + T, time_average_T=T, n_times=n_times, times_seed=seed)
    return out


# --------------------------------------------------------------------------
# estimators
# --------------------------------------------------------------------------


def interior_sites(model: LatticeModel, geom: BoxGeometry, t: float = 0.0, margin: int | None = None) -> np.ndarray:
    """Indices of sites far enough from the severing to see a bulk environment.

    Eligible sites satisfy ``gamma(i, complement) > 2 + ceil(t) D``, or
    ``> margin`` when given.
    """
    need = margin if margin is not None else 2 + math.ceil(abs(t)) * model.range
    gam = gamma_to_complement(model, geom)
    return np.flatnonzero(gam > need)


def _per_sample_site_mean(values: np.ndarray, sites: np.ndarray) -> np.ndarray:
    if len(sites) == 0:
        raise ValueError("no eligible interior sites; enlarge the box")
    return values[:, sites].mean(axis=1)


def bootstrap_stderr(x: np.ndarray, seed: int = 0, n_boot: int = 200, stat=np.mean) -> float:
    """Bootstrap standard error of ``stat`` over the first axis."""
    x = np.asarray(x)
    if len(x) < 2:
        return float("nan")
    rng = chunk_rng(seed, 0, stream=7)
    idx = rng.integers(0, len(x), size=(n_boot, len(x)))
    reps = np.array([stat(x[i]) for i in idx])
    return float(np.std(reps, ddof=1))


def _mean_estimate(x: np.ndarray, seed=None, **extra) -> Estimate:
    x = np.asarray(x, dtype=float)
    se = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else float("nan")
    return Estimate(float(np.mean(x)), se, len(x), seed, "MC", dict(extra))


def moment_M(ens: Ensemble, model: LatticeModel, zeta: float = 1.0, *, sites=None, shift: float = 0.0) -> Estimate:
    """``M_zeta = E |E_0^{n.i.}|^zeta``, averaged over interior sites.

    Translation invariance lets every interior site stand in for the origin;
    the per-sample site average is the unit of the standard error.
    """
    if zeta < 1:
        raise ValueError("zeta must be >= 1")
    sys_ = _systems_cache(model, ens.geom)
    e = np.abs(sys_.energy_noninteracting(ens.q, ens.p) + shift) ** zeta
    if sites is None:
        sites = interior_sites(model, ens.geom, ens.meta.get("t", 0.0))
    return _mean_estimate(_per_sample_site_mean(e, np.asarray(sites)), ens.meta.get("seed"), zeta=zeta)


def membership_fraction(ens: Ensemble, model: LatticeModel, r: float, C: float) -> float:
    """Fraction of samples with ``max_i E_i^{n.i.} / (1 + |i|)^r <= C`` on the box."""
    if r <= 0 or C < 0:
        raise ValueError("need r > 0 and C >= 0")
    sys_ = _systems_cache(model, ens.geom)
    e = sys_.energy_noninteracting(ens.q, ens.p)
    w = (1.0 + ens.geom.norms()) ** r
    return float(np.mean(np.max(e / w, axis=1) <= C))


@dataclass
class Observable:
    """Bounded, strictly local, Lipschitz function of a window of sites.

    ``fn(q, p)`` receives arrays of shape ``(N, len(offsets), site_dim)``,
    the window placed at some base site, and returns ``(N,)`` values.
    """

    name: str
    offsets: tuple
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lipschitz: float = 1.0
    bound: float = 1.0

    @property
    def support_radius(self) -> int:
        return int(np.max(np.abs(np.asarray(self.offsets)))) if len(self.offsets) else 0

    def window_values(self, ens: Ensemble, base_sites: np.ndarray) -> np.ndarray:
        """Values ``(N, len(base_sites))`` with the window moved to each base site."""
        g = ens.geom
        offs = np.asarray(self.offsets).reshape(len(self.offsets), g.nu)
        cols = []
        for b in base_sites:
            idx = g.index(g.sites[b][None, :] + offs)
            cols.append(self.fn(ens.q[:, idx, :], ens.p[:, idx, :]))
        return np.stack(cols, axis=1)


def standard_panel(nu: int = 1) -> list[Observable]:
    """Ten bounded local observables on the origin and its first neighbour."""
    o = (0,) * nu
    e1 = (1,) + (0,) * (nu - 1)
    one, two = (o,), (o, e1)
    return [
        Observable("tanh q0", one, lambda q, p: np.tanh(q[:, 0, 0])),
        Observable("tanh p0", one, lambda q, p: np.tanh(p[:, 0, 0])),
        Observable("tanh^2 q0", one, lambda q, p: np.tanh(q[:, 0, 0]) ** 2, 2.0),
        Observable("tanh^2 p0", one, lambda q, p: np.tanh(p[:, 0, 0]) ** 2, 2.0),
        Observable("gauss q0", one, lambda q, p: np.exp(-q[:, 0, 0] ** 2), 1.0),
        Observable("gauss p0", one, lambda q, p: np.exp(-p[:, 0, 0] ** 2), 1.0),
        Observable("tanh q0 p0", one, lambda q, p: np.tanh(q[:, 0, 0] * p[:, 0, 0]), 2.0),
        Observable("tanh dq", two, lambda q, p: np.tanh(q[:, 1, 0] - q[:, 0, 0]), 2.0),
        Observable("tanh p0 p1", two, lambda q, p: np.tanh(p[:, 0, 0] * p[:, 1, 0]), 2.0),
        Observable("cos dq", two, lambda q, p: np.cos(q[:, 1, 0] - q[:, 0, 0]), 2.0),
    ]


def _eligible_bases(ens: Ensemble, f: Observable, model: LatticeModel | None, t: float | None):
    g = ens.geom
    offs = np.asarray(f.offsets).reshape(len(f.offsets), g.nu)
    if model is not None:
        inner = interior_sites(model, g, ens.meta.get("t", 0.0) if t is None else t)
    else:
        inner = np.arange(g.n_sites)
    inner_set = set(inner.tolist())
    bases = [b for b in inner
             if np.all(g.contains(g.sites[b][None, :] + offs))
             and all(int(k) in inner_set for k in g.index(g.sites[b][None, :] + offs))]
    if not bases:
        raise ValueError(f"support of {f.name!r} does not fit in the interior of the box")
    return np.array(bases)


def expect(ens: Ensemble, f: Observable, model: LatticeModel | None = None, *, average_sites: bool = True,
           t: float | None = None, seed: int = 0, n_boot: int = 200) -> Estimate:
    """Mean of ``f`` with a bootstrap standard error.

    With ``average_sites`` the window is moved over every eligible interior
    base site and averaged per sample before bootstrapping; otherwise only
    the origin is used.
    """
    bases = _eligible_bases(ens, f, model, t)
    if not average_sites:
        origin = ens.geom.origin
        if origin not in set(bases.tolist()):
            raise ValueError("origin window does not fit the interior")
        bases = np.array([origin])
    vals = f.window_values(ens, bases).mean(axis=1)
    if np.ptp(vals) == 0:
        return Estimate(float(vals[0]), 0.0, ens.N, ens.meta.get("seed"), "MC", {"observable": f.name})
    return Estimate(float(np.mean(vals)), bootstrap_stderr(vals, seed, n_boot), ens.N, ens.meta.get("seed"), "MC",
                    {"observable": f.name})


@dataclass
class DistanceReport:
    value: float
    per_observable: dict
    z_max: float

    def to_dict(self) -> dict:
        return {"value": self.value, "z_max": self.z_max, "per_observable": self.per_observable}


def observable_distance(ens1: Ensemble, ens2: Ensemble, panel: Sequence[Observable] | None = None,
                        model: LatticeModel | None = None, *, seed: int = 0) -> DistanceReport:
    """``max_f |E_1 f - E_2 f|`` over the panel, with per-observable z-scores."""
    panel = list(panel) if panel is not None else standard_panel(ens1.geom.nu)
    per, zs = {}, []
    for f in panel:
        a = expect(ens1, f, model, seed=seed)
        b = expect(ens2, f, model, seed=seed + 1)
        diff = abs(a.value - b.value)
        se = math.hypot(a.stderr, b.stderr)
        z = diff / se if se > 0 else (0.0 if diff == 0 else math.inf)
        per[f.name] = {"diff": diff, "stderr": se, "z": z}
        zs.append(z)
    return DistanceReport(max(v["diff"] for v in per.values()), per, max(zs))


# --------------------------------------------------------------------------
# periodization
# --------------------------------------------------------------------------


def periodize(block: Ensemble, m: int, n_copies: int, seed: int = 0) -> Ensemble:
    """Sample the shift-averaged periodic extension of a block state, on ``Lambda(m)``.

    For every output sample a shift ``j`` is drawn uniformly from
    ``Lambda(a)``; the lattice is tiled by ``j + 2a t + Lambda(a)``, and every
    tile meeting the window receives an independent block sample (drawn with
    replacement from ``block``).
    """
    a, nu = block.geom.a, block.geom.nu
    if m < a:
        raise ValueError(f"window scale {m} smaller than block scale {a}")
    win = box_sites(nu, m)
    rng = chunk_rng(seed, 0, stream=3)
    shifts = block.geom.sites[rng.integers(0, block.geom.n_sites, size=n_copies)]  # (S, nu)
    rel = win.sites[None, :, :] - shifts[:, None, :]  # (S, n, nu)
    tile = np.floor_divide(rel + a - 1, 2 * a)
    local = rel - 2 * a * tile
    # rel ranges over [-m + 1 - a, m + a - 1]
    tmin = (-m) // (2 * a)
    span = (m + 2 * a - 2) // (2 * a) - tmin + 1
    flat_tile = np.ravel_multi_index(tuple((tile - tmin).transpose(2, 0, 1)), (span,) * nu)
    pick = rng.integers(0, block.N, size=(n_copies, span**nu))
    src = np.take_along_axis(pick, flat_tile, axis=1)  # (S, n)
    loc = block.geom.index(local)  # (S, n)
    q = block.q[src, loc]
    p = block.p[src, loc]
    meta = {"seed": seed, "generator": GENERATOR_ID, "kind": "periodized", "block_a": a,
            "block_seed": block.meta.get("seed"), "translation_invariant": True}
    return Ensemble(q, p, win, block.model_hash, meta)


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def save_ensemble(path, ens: Ensemble) -> None:
    """Binary container: ``.npz`` with arrays and a JSON header."""
    header = {"model_hash": ens.model_hash, "nu": ens.geom.nu, "a": ens.geom.a, "N": ens.N,
              "seed": ens.meta.get("seed"), "meta": ens.meta}
    with open(path, "wb") as fh:
        np.savez_compressed(fh, q=ens.q, p=ens.p, header=np.array(json.dumps(header, default=str)))


def load_ensemble(path) -> Ensemble:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        return Ensemble(z["q"], z["p"], box_sites(header["nu"], header["a"]), header["model_hash"], header["meta"])


def export_csv(path, ens: Ensemble, max_samples: int = 10_000) -> None:
    """Long-format CSV (sample, site, component, q, p) for small ensembles."""
    if ens.N > max_samples:
        raise ValueError(f"CSV export is limited to {max_samples} samples")
    N, n, d = ens.q.shape
    s, i, c = np.meshgrid(np.arange(N), np.arange(n), np.arange(d), indexing="ij")
    table = np.column_stack([s.ravel(), i.ravel(), c.ravel(), ens.q.ravel(), ens.p.ravel()])
    header = f"model_hash={ens.model_hash} seed={ens.meta.get('seed')} N={N}\nsample,site,component,q,p"
    np.savetxt(Path(path), table, delimiter=",", header=header, fmt=["%d", "%d", "%d", "%.17g", "%.17g"])
