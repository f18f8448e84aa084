"""Fixed-length HMC with dual-averaging step size and diagonal mass adaptation.

A *target* is any object with ``logp_and_grad(theta) -> (float, ndarray)``.
If it also exposes ``trajectory(theta, p, grad, eps, n_steps, inv_mass)``
(e.g. a jitted JAX integrator) that is used instead of the numpy leapfrog.
``initial_point(rng)`` and ``constrained_row(theta)`` are picked up when
present.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import pandas as pd

__all__ = [
    "HmcConfig",
    "Chain",
    "SamplerError",
    "leapfrog",
    "run_chain",
    "run_chains",
    "split_rhat",
    "ess",
    "diagnostics",
    "write_chain",
]


class SamplerError(RuntimeError):
    pass


@dataclass
class HmcConfig:
    n_warmup: int = 1000
    n_draws: int = 1000
    leapfrog_steps: int = 20
    target_accept: float = 0.8
    seed: int = 0
    mass: Optional[np.ndarray] = None
    adapt_mass: bool = True
    divergence_threshold: float = 1000.0
    max_warmup_divergent: float = 0.5
    init_jitter: float = 0.25
    step_jitter: float = 0.2

    def __post_init__(self):
        if self.n_warmup < 0 or self.n_draws < 1 or self.leapfrog_steps < 1:
            raise ValueError("iteration counts must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if not 0.0 <= self.step_jitter < 1.0:
            raise ValueError("step_jitter must lie in [0, 1)")


@dataclass
class Chain:
    draws: np.ndarray
    logp: np.ndarray
    accept_rate: float
    step_size: float
    step_size_trace: np.ndarray
    inv_mass: np.ndarray
    seed: int
    chain_index: int
    n_divergent: int
    n_divergent_warmup: int
    constrained: Optional[np.ndarray] = None
    accept_stats: np.ndarray = field(default_factory=lambda: np.zeros(0))


def leapfrog(theta, momentum, eps: float, L: int, grad_fn: Callable, inv_mass=None):
    """``L`` leapfrog steps of size ``eps`` for ``H = -logp + p^T M^-1 p / 2``.

    ``grad_fn`` returns the gradient of the log density.
    """
    theta = np.array(theta, dtype=float)
    p = np.array(momentum, dtype=float)
    inv_mass = np.ones_like(theta) if inv_mass is None else inv_mass
    g = grad_fn(theta)
    for _ in range(L):
        p = p + 0.5 * eps * g
        theta = theta + eps * inv_mass * p
        g = grad_fn(theta)
        p = p + 0.5 * eps * g
    return theta, p


class _DualAveraging:
    def __init__(self, eps0: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * eps0)
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.hbar = 0.0
        self.log_eps_bar = 0.0
        self.t = 0

    def update(self, accept: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.hbar = (1 - eta) * self.hbar + eta * (self.target - accept)
        log_eps = self.mu - math.sqrt(self.t) / self.gamma * self.hbar
        w = self.t ** (-self.kappa)
        self.log_eps_bar = w * log_eps + (1 - w) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self) -> float:
        return math.exp(self.log_eps_bar)


class _Integrator:
    def __init__(self, target):
        self.target = target
        self.native = hasattr(target, "trajectory")

    def __call__(self, theta, p, grad, eps, L, inv_mass):
        if self.native:
            return self.target.trajectory(theta, p, grad, eps, L, inv_mass)
        th, mom = theta.copy(), p.copy()
        g = grad
        lp = -np.inf
        for _ in range(L):
            mom = mom + 0.5 * eps * g
            th = th + eps * inv_mass * mom
            lp, g = self.target.logp_and_grad(th)
            if not np.isfinite(lp) or not np.all(np.isfinite(g)):
                return th, mom, -np.inf, g
            mom = mom + 0.5 * eps * g
        return th, mom, lp, g


def _kinetic(p, inv_mass):
    # momenta of a diverging trajectory can overflow; inf energy counts as divergent
    with np.errstate(over="ignore", invalid="ignore"):
        return 0.5 * float(np.sum(inv_mass * p * p))


def _initial_step(integ, theta, lp, g, inv_mass, rng) -> float:
    """Double/halve a single-step size until acceptance crosses 1/2."""
    eps = 0.1
    p = rng.standard_normal(theta.size) / np.sqrt(inv_mass)
    h0 = -lp + _kinetic(p, inv_mass)

    def log_ratio(e):
        _, p1, lp1, _ = integ(theta, p, g, e, 1, inv_mass)
        h1 = -lp1 + _kinetic(p1, inv_mass)
        return h0 - h1 if np.isfinite(h1) else -np.inf

    direction = 1.0 if log_ratio(eps) > math.log(0.5) else -1.0
    for _ in range(50):
        r = log_ratio(eps)
        if direction > 0 and not r > math.log(0.5):
            break
        if direction < 0 and r > math.log(0.5):
            break
        eps = eps * (2.0 if direction > 0 else 0.5)
    return eps


def run_chain(cfg: HmcConfig, target, chain_index: int = 0, init=None) -> Chain:
    """One HMC chain.  Deterministic in ``(cfg.seed, chain_index)``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(chain_index)]))
    if init is not None:
        theta = np.array(init, dtype=float)
    elif hasattr(target, "initial_point"):
        theta = np.asarray(target.initial_point(rng, cfg.init_jitter), dtype=float)
    else:
        raise ValueError("an initial point is required")
    lp, g = target.logp_and_grad(theta)
    if not np.isfinite(lp):
        raise SamplerError("initial point has non-finite log posterior")
    dim = theta.size
    inv_mass = np.ones(dim) if cfg.mass is None else 1.0 / np.asarray(cfg.mass, dtype=float)
    integ = _Integrator(target)
    L = cfg.leapfrog_steps

    eps = _initial_step(integ, theta, lp, g, inv_mass, rng)
    da = _DualAveraging(eps, cfg.target_accept)
    n_w = cfg.n_warmup
    win_start, win_end = n_w // 2, int(0.85 * n_w)
    window: List[np.ndarray] = []
    eps_trace = np.zeros(n_w)
    n_div_warm = 0
    draws = np.empty((cfg.n_draws, dim))
    logps = np.empty(cfg.n_draws)
    acc_stats = np.empty(cfg.n_draws)
    n_div = 0

    for it in range(n_w + cfg.n_draws):
        warm = it < n_w
        p0 = rng.standard_normal(dim) / np.sqrt(inv_mass)
        h0 = -lp + _kinetic(p0, inv_mass)
        # jittered step size breaks periodic trajectories of fixed length
        eps_it = eps * (1.0 + cfg.step_jitter * (2.0 * rng.uniform() - 1.0))
        th1, p1, lp1, g1 = integ(theta, p0, g, eps_it, L, inv_mass)
        h1 = -lp1 + _kinetic(p1, inv_mass) if np.isfinite(lp1) else np.inf
        dh = h1 - h0
        divergent = not np.isfinite(dh) or dh > cfg.divergence_threshold or not np.all(np.isfinite(g1))
        accept = 0.0 if divergent else min(1.0, math.exp(min(0.0, -dh)))
        if not divergent and rng.uniform() < accept:
            theta, lp, g = th1, lp1, g1
        if warm:
            n_div_warm += divergent
            eps = da.update(accept)
            eps_trace[it] = eps
            if cfg.adapt_mass and win_start <= it < win_end:
                window.append(theta.copy())
            if cfg.adapt_mass and it == win_end - 1 and len(window) >= 10:
                w = np.asarray(window)
                n = w.shape[0]
                var = w.var(axis=0, ddof=1)
                # shrink toward 1e-3 as in common practice for short windows
                inv_mass = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                eps = _initial_step(integ, theta, lp, g, inv_mass, rng)
                da = _DualAveraging(eps, cfg.target_accept)
            if it == n_w - 1:
                eps = da.final
                if n_div_warm > cfg.max_warmup_divergent * n_w:
                    raise SamplerError(
                        f"chain {chain_index}: {n_div_warm}/{n_w} divergent warmup trajectories"
                    )
        else:
            k = it - n_w
            draws[k] = theta
            logps[k] = lp
            acc_stats[k] = accept
            n_div += divergent
    if n_w == 0:
        eps_trace = np.array([eps])
    constrained = None
    if hasattr(target, "constrained_row"):
        constrained = np.array([target.constrained_row(d) for d in draws])
    return Chain(
        draws=draws,
        logp=logps,
        accept_rate=float(acc_stats.mean()),
        step_size=float(eps),
        step_size_trace=eps_trace,
        inv_mass=inv_mass,
        seed=int(cfg.seed),
        chain_index=int(chain_index),
        n_divergent=int(n_div),
        n_divergent_warmup=int(n_div_warm),
        constrained=constrained,
        accept_stats=acc_stats,
    )


def run_chains(cfg: HmcConfig, target, n_chains: int = 4, threads: int = 1) -> List[Chain]:
    """Independent chains; RNG streams depend only on ``(seed, chain_index)``."""
    if threads > 1 and n_chains > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(lambda k: run_chain(cfg, target, k), range(n_chains)))
    return [run_chain(cfg, target, k) for k in range(n_chains)]


# ---------------------------------------------------------------- diagnostics

def _as_3d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :, None]
    elif x.ndim == 2:
        x = x[:, :, None]
    return x


def split_rhat(x) -> np.ndarray:
    """Split-R-hat for draws shaped ``(chains, draws[, params])``."""
    x = _as_3d(x)
    m, n, _ = x.shape
    if n < 4:
        raise ValueError("need at least 4 draws per chain")
    h = n // 2
    halves = np.concatenate([x[:, :h], x[:, n - h :]], axis=0)
    return _rhat(halves)


def _rhat(x):
    m, n, _ = x.shape
    means = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1) if m > 1 else np.zeros_like(W)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / W)
    return np.where(W > 0, r, np.where(B > 0, np.inf, 1.0))


def _autocov(x):
    """Autocovariance along axis 1 via FFT, ``(chains, draws, params)``."""
    m, n, k = x.shape
    xc = x - x.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, n=size, axis=1)
    ac = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return ac / n


def ess(x) -> np.ndarray:
    """Bulk effective sample size with Geyer's initial monotone sequence."""
    x = _as_3d(x)
    m, n, k = x.shape
    if n < 4:
        raise ValueError("need at least 4 draws per chain")
    acov = _autocov(x)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    means = x.mean(axis=1)
    B = n * means.var(axis=0, ddof=1) if m > 1 else np.zeros(k)
    var_plus = (n - 1) / n * W + B / n
    out = np.full(k, float(m * n))
    for j in range(k):
        if var_plus[j] <= 0:
            continue
        rho = 1.0 - (W[j] - acov[:, :, j].mean(axis=0)) / var_plus[j]
        rho[0] = 1.0
        # pair sums, truncated at first non-positive, then made monotone
        n_pairs = n // 2
        P = rho[: 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
        stop = np.argmax(P <= 0) if np.any(P <= 0) else P.size
        P = np.minimum.accumulate(P[:stop]) if stop > 0 else P[:1]
        tau = -1.0 + 2.0 * float(np.sum(P))
        tau = max(tau, 1.0 / math.log10(m * n))
        out[j] = m * n / tau
    return out


def diagnostics(chains: Sequence, names: Optional[Sequence[str]] = None, constrained: bool = True) -> pd.DataFrame:
    """Per-parameter mean, sd, 2.5%/97.5% quantiles, ESS and split-R-hat.

    Accepts a list of :class:`Chain` (constrained draws when available) or a
    raw ``(chains, draws, params)`` array.
    """
    if isinstance(chains, np.ndarray):
        x = _as_3d(chains)
    else:
        if not chains:
            raise ValueError("need at least one chain")
        x = np.stack(
            [c.constrained if (constrained and c.constrained is not None) else c.draws for c in chains]
        )
    m, n, k = x.shape
    if n < 4:
        raise ValueError("need at least 4 draws per chain")
    flat = x.reshape(m * n, k)
    df = pd.DataFrame(
        {
            "mean": flat.mean(axis=0),
            "sd": flat.std(axis=0, ddof=1),
            "q2.5": np.quantile(flat, 0.025, axis=0),
            "q97.5": np.quantile(flat, 0.975, axis=0),
            "ess": ess(x),
            "rhat": split_rhat(x),
        },
        index=pd.Index(list(names) if names is not None else [f"p{j}" for j in range(k)], name="parameter"),
    )
    return df


def write_chain(chain: Chain, names: Sequence[str], path, config: Optional[HmcConfig] = None) -> List[Path]:
    """One CSV (constrained view, one row per draw) plus a JSON sidecar."""
    path = Path(path)
    vals = chain.constrained if chain.constrained is not None else chain.draws
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(names) + "\n")
        for row in vals:
            fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")
    side = path.with_suffix(".json")
    meta = {
        "seed": chain.seed,
        "chain_index": chain.chain_index,
        "accept_rate": chain.accept_rate,
        "step_size": chain.step_size,
        "n_divergent": chain.n_divergent,
        "n_divergent_warmup": chain.n_divergent_warmup,
        "config": {k: v for k, v in asdict(config).items() if k != "mass"} if config else None,
    }
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [path, side]
