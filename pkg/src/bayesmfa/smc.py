"""Adaptive-tempering SMC sampler with marginal-likelihood estimation.

The sampler moves a particle population from the prior to the posterior
through ``pi_beta ~ prior * likelihood**beta``.  Each stage picks the next
``beta`` by bisection so the incremental weights keep an ESS of
``ess_target * N``, resamples systematically and applies random-walk
Metropolis moves in unconstrained coordinates.  The log evidence is the sum
over stages of the log mean incremental weight.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .errors import ConfigError, DegeneratePosteriorError, DimensionMismatchError, NonConvergenceError
from .likelihood import Dataset, LikelihoodModel, MissingRecordPolicy
from .network import NetworkStructure, ParameterState
from .priors import RestrictedPrior

log = logging.getLogger(__name__)

KERNELS = ("rw", "hmc")


@dataclass(frozen=True)
class SmcConfig:
    particles: int = 2000
    ess_target: float = 0.5
    mutation_steps: int = 15
    max_stages: int = 200
    seed: int = 0
    code: str = ""
    final_resample: bool = True
    proposal_scale: float = 2.38
    kernel: str = "rw"
    leapfrog_steps: int = 10
    target_acceptance: float = 0.65

    def __post_init__(self):
        problems = []
        if self.particles < 100:
            problems.append(f"particles must be >= 100, got {self.particles}")
        if not 0 < self.ess_target < 1:
            problems.append(f"ess_target must lie in (0, 1), got {self.ess_target}")
        if self.mutation_steps < 1:
            problems.append(f"mutation_steps must be >= 1, got {self.mutation_steps}")
        if self.max_stages < 1:
            problems.append(f"max_stages must be >= 1, got {self.max_stages}")
        if self.kernel not in KERNELS:
            problems.append(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        if self.leapfrog_steps < 1:
            problems.append(f"leapfrog_steps must be >= 1, got {self.leapfrog_steps}")
        if not 0 < self.target_acceptance < 1:
            problems.append(f"target_acceptance must lie in (0, 1), got {self.target_acceptance}")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return asdict(self)


def structure_seed(master_seed: int, code: str) -> np.random.SeedSequence:
    """Independent stream per (master seed, structure code)."""
    digest = hashlib.sha256(f"{int(master_seed)}:{code}".encode()).digest()
    words = [int.from_bytes(digest[k:k + 4], "little") for k in range(0, 16, 4)]
    return np.random.SeedSequence(words)


def make_rng(master_seed: int, code: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(structure_seed(master_seed, code)))


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w**2))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.uniform() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="left")


# --- unconstrained coordinates ----------------------------------------------


def stick_breaking_forward(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map ``(N, K-1)`` reals to ``(N, K)`` simplex points and log|Jacobian|.

    Offsets are chosen so that ``y = 0`` maps to the simplex centre.
    """
    y = np.atleast_2d(y)
    n, km1 = y.shape
    k = km1 + 1
    x = np.empty((n, k))
    logj = np.zeros(n)
    stick = np.ones(n)
    for j in range(km1):
        a = y[:, j] - np.log(k - j - 1)
        z = expit(a)
        x[:, j] = stick * z
        # log z + log(1 - z) written to stay finite for large |a|
        logj += -np.logaddexp(0.0, -a) - np.logaddexp(0.0, a) + np.log(stick)
        stick = stick - x[:, j]
    x[:, km1] = stick
    return x, logj


def stick_breaking_inverse(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    n, k = x.shape
    if np.any(x <= 0):
        raise ValueError("simplex boundary points have no unconstrained image")
    y = np.empty((n, k - 1))
    stick = np.ones(n)
    for j in range(k - 1):
        z = x[:, j] / stick
        y[:, j] = np.log(z) - np.log1p(-z) + np.log(k - j - 1)
        stick = stick - x[:, j]
    return y


class UnconstrainedMap:
    """Bijection between a layout's flat parameters and unconstrained reals."""

    def __init__(self, layout):
        self.layout = layout
        self.blocks = []
        pos = 0
        for sl in layout.simplex_slices:
            k = sl.stop - sl.start
            self.blocks.append((slice(pos, pos + k - 1), sl))
            pos += k - 1
        self.input_slice = slice(pos, pos + len(layout.input_nodes))
        self.dim = pos + len(layout.input_nodes)

    def _index(self):
        """Column bookkeeping that lets all simplex blocks break at once."""
        ucols, offsets, starts, tcols, lasts, last_t = [], [], [], [], [], []
        for us, ts in self.blocks:
            k = ts.stop - ts.start
            first = len(ucols)
            for j in range(k - 1):
                ucols.append(us.start + j)
                offsets.append(np.log(k - j - 1))
                starts.append(first)
                tcols.append(ts.start + j)
            lasts.append(len(ucols) - 1)
            last_t.append(ts.stop - 1)
        self._ucols = np.array(ucols, dtype=int)
        self._offsets = np.array(offsets)
        self._starts = np.array(starts, dtype=int)
        self._tcols = np.array(tcols, dtype=int)
        self._lasts = np.array(lasts, dtype=int)
        self._last_t = np.array(last_t, dtype=int)
        self._block_starts = np.array([self._starts[c] for c in self._lasts], dtype=int)
        self._col_block = np.repeat(np.arange(len(self.blocks)), [us.stop - us.start for us, _ in self.blocks])

    def forward(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unconstrained ``(N, d)`` to parameters ``(N, P)`` plus log|J|."""
        u = np.atleast_2d(u)
        if not hasattr(self, "_ucols"):
            self._index()
        n = u.shape[0]
        theta = np.empty((n, self.layout.size))
        logj = np.zeros(n)
        if self.blocks:
            a = u[:, self._ucols] - self._offsets
            log_z = -np.logaddexp(0.0, -a)
            log_1mz = -np.logaddexp(0.0, a)
            cs = np.cumsum(log_1mz, axis=1)
            excl = cs - log_1mz
            log_stick = excl - excl[:, self._starts]
            theta[:, self._tcols] = np.exp(log_z + log_stick)
            logj += np.sum(log_z + log_1mz + log_stick, axis=1)
            theta[:, self._last_t] = np.exp(cs[:, self._lasts] - excl[:, self._block_starts])
        if self.input_slice.stop > self.input_slice.start:
            theta[:, self.layout.input_slice] = np.exp(u[:, self.input_slice])
            logj += u[:, self.input_slice].sum(axis=1)
        return theta, logj

    def pullback(self, u: np.ndarray, theta: np.ndarray, g_theta: np.ndarray, jacobian: bool = True) -> np.ndarray:
        """Gradient in ``u`` of ``F(theta(u))`` (plus ``log|J(u)|``) given ``dF/dtheta``."""
        u = np.atleast_2d(u)
        if not hasattr(self, "_ucols"):
            self._index()
        jac = 1.0 if jacobian else 0.0
        out = np.zeros_like(u)
        if self.blocks:
            z = expit(u[:, self._ucols] - self._offsets)
            # g is the gradient with respect to log x; log|J| = sum log x_j + log(1 - z_j)
            g = theta[:, self._tcols] * g_theta[:, self._tcols] + jac
            cs = np.cumsum(g, axis=1)
            excl = cs - g
            within = cs - excl[:, self._starts]
            total = cs[:, self._lasts] - excl[:, self._block_starts] + theta[:, self._last_t] * g_theta[:, self._last_t]
            later = total[:, self._col_block] - within
            out[:, self._ucols] = g * (1.0 - z) - z * later - jac * z
        if self.input_slice.stop > self.input_slice.start:
            sl = self.layout.input_slice
            out[:, self.input_slice] = theta[:, sl] * g_theta[:, sl] + jac
        return out

    def inverse(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(theta)
        u = np.empty((theta.shape[0], self.dim))
        for us, ts in self.blocks:
            u[:, us] = stick_breaking_inverse(theta[:, ts])
        if self.input_slice.stop > self.input_slice.start:
            q = theta[:, self.layout.input_slice]
            if np.any(q <= 0):
                raise ValueError("external inputs must be > 0 to take logs")
            u[:, self.input_slice] = np.log(q)
        return u


@dataclass(frozen=True)
class UnconstrainedState:
    simplex: dict
    log_inputs: dict

    def vector(self, structure: NetworkStructure) -> np.ndarray:
        layout = structure.layout
        parts = [np.asarray(self.simplex[n], dtype=float) for n in layout.simplex_nodes]
        parts.append(np.array([self.log_inputs[i] for i in layout.input_nodes], dtype=float))
        return np.concatenate(parts) if parts else np.zeros(0)


def to_unconstrained(params: ParameterState, structure: NetworkStructure) -> UnconstrainedState:
    layout = structure.layout
    theta = layout.pack(params)
    try:
        u = UnconstrainedMap(layout).inverse(theta[None])[0]
    except ValueError as exc:
        raise DimensionMismatchError(f"not invertible: {exc}") from None
    umap = UnconstrainedMap(layout)
    simplex = {n: u[us].copy() for n, (us, _) in zip(layout.simplex_nodes, umap.blocks)}
    log_inputs = {i: float(v) for i, v in zip(layout.input_nodes, u[umap.input_slice])}
    return UnconstrainedState(simplex, log_inputs)


def from_unconstrained(state: UnconstrainedState, structure: NetworkStructure) -> ParameterState:
    layout = structure.layout
    theta, _ = UnconstrainedMap(layout).forward(state.vector(structure)[None])
    return layout.unpack(theta[0])


# --- targets ----------------------------------------------------------------


class Target:
    """What the sampler needs: prior draws and log densities in ``u`` space."""

    dim: int
    names: list[str]

    def sample_prior(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def log_prior(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_likelihood(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_densities(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.log_prior(u), self.log_likelihood(u)

    def gradients(self, u: np.ndarray):
        """``(log prior, log likelihood, d log prior/du, d log likelihood/du)``."""
        raise NotImplementedError(f"{type(self).__name__} provides no gradients")

    def constrain(self, u: np.ndarray) -> np.ndarray:
        return u


class MFATarget(Target):
    def __init__(self, prior: RestrictedPrior, likelihood: LikelihoodModel):
        self.prior = prior
        self.likelihood = likelihood
        self.map = UnconstrainedMap(prior.layout)
        self.dim = self.map.dim
        self.names = list(prior.layout.names)

    def sample_prior(self, rng, n):
        theta = self.prior.sample(rng, n)
        # zero-probability boundary draws are nudged inside before taking logs
        for _, ts in self.map.blocks:
            block = np.maximum(theta[:, ts], 1e-300)
            theta[:, ts] = block / block.sum(axis=1, keepdims=True)
        sl = self.prior.layout.input_slice
        theta[:, sl] = np.maximum(theta[:, sl], 1e-300)
        return self.map.inverse(theta)

    def log_prior(self, u):
        theta, logj = self.map.forward(u)
        return self.prior.log_density(theta) + logj

    def log_likelihood(self, u):
        theta, _ = self.map.forward(u)
        with np.errstate(all="ignore"):
            return self.likelihood.log_likelihood_theta(theta)

    def log_densities(self, u):
        theta, logj = self.map.forward(u)
        with np.errstate(all="ignore"):
            return self.prior.log_density(theta) + logj, self.likelihood.log_likelihood_theta(theta)

    def gradients(self, u):
        theta, logj = self.map.forward(u)
        with np.errstate(all="ignore"):
            lp = self.prior.log_density(theta) + logj
            ll, g_ll = self.likelihood.value_and_grad_theta(theta)
            g_lp = self.map.pullback(u, theta, self.prior.grad_log_density(theta))
            g_ll = self.map.pullback(u, theta, g_ll, jacobian=False)
        return lp, ll, np.nan_to_num(g_lp), np.nan_to_num(g_ll)

    def constrain(self, u):
        return self.map.forward(u)[0]


class FunctionTarget(Target):
    """Target built from plain callables; used by the polynomial demo."""

    def __init__(self, dim: int, sample_prior: Callable, log_prior: Callable, log_likelihood: Callable,
                 names: Sequence[str] | None = None):
        self.dim = dim
        self._sample = sample_prior
        self._lp = log_prior
        self._ll = log_likelihood
        self.names = list(names) if names is not None else [f"u{k}" for k in range(dim)]

    def sample_prior(self, rng, n):
        return self._sample(rng, n)

    def log_prior(self, u):
        return self._lp(u)

    def log_likelihood(self, u):
        return self._ll(u)


# --- sampler ----------------------------------------------------------------


@dataclass
class ParticleEnsemble:
    code: str
    names: list[str]
    theta: np.ndarray
    u: np.ndarray
    weights: np.ndarray
    log_likelihood: np.ndarray
    beta_schedule: list[float]
    log_evidence: float
    log_evidence_increments: list[float]
    acceptance: list[float]
    ess_history: list[float]
    config: SmcConfig
    applicable_records: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.weights)

    def metadata(self) -> dict:
        return {
            "structure": self.code,
            "log_evidence": self.log_evidence,
            "log_evidence_increments": list(self.log_evidence_increments),
            "beta_schedule": list(self.beta_schedule),
            "acceptance": list(self.acceptance),
            "ess": list(self.ess_history),
            "seed": self.config.seed,
            "stream": [int(w) for w in structure_seed(self.config.seed, self.code).entropy],
            "config": self.config.to_dict(),
            "applicable_records": list(self.applicable_records),
            "flags": list(self.flags),
            "parameters": list(self.names),
        }


def _next_delta(ll: np.ndarray, remaining: float, target_frac: float) -> float:
    finite = np.isfinite(ll)
    n_fin = int(finite.sum())
    target = target_frac * n_fin
    lf = ll[finite]

    def ess(delta):
        a = delta * lf
        a = a - a.max()
        w = np.exp(a)
        return w.sum() ** 2 / np.sum(w**2)

    if ess(remaining) >= target:
        return remaining
    lo, hi = 0.0, remaining
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if ess(mid) >= target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(hi, 1e-300):
            break
    return max(lo, 1e-300) if lo > 0 else hi


def _mutate(target: Target, u, lp, ll, beta, steps, rng, scale):
    n, d = u.shape
    if d == 0:
        return u, lp, ll, 1.0
    cov = np.atleast_2d(np.cov(u, rowvar=False))
    prop_cov = (scale**2 / d) * cov + 1e-6 * np.eye(d)
    chol = np.linalg.cholesky(prop_cov)
    accepted = 0
    for _ in range(steps):
        prop = u + rng.standard_normal((n, d)) @ chol.T
        lp_new, ll_new = target.log_densities(prop)
        with np.errstate(invalid="ignore"):
            log_ratio = (lp_new + beta * np.where(np.isfinite(ll_new), ll_new, -np.inf)) - (lp + beta * ll)
        log_ratio = np.where(np.isfinite(lp_new) & np.isfinite(ll_new), log_ratio, -np.inf)
        accept = np.log(rng.uniform(size=n)) < log_ratio
        u = np.where(accept[:, None], prop, u)
        lp = np.where(accept, lp_new, lp)
        ll = np.where(accept, ll_new, ll)
        accepted += int(accept.sum())
    return u, lp, ll, accepted / (n * steps)


def _mutate_hmc(target: Target, u, lp, ll, glp, gll, beta, steps, rng, eps, leapfrog):
    """Hamiltonian moves whitened by the ensemble covariance.

    Returns the moved state, the acceptance rate and the mean acceptance
    probability, which drives the step-size adaptation.
    """
    n, d = u.shape
    cov = np.atleast_2d(np.cov(u, rowvar=False)) + 1e-6 * np.eye(d)
    chol = np.linalg.cholesky(cov)

    def energy(lp_, ll_):
        with np.errstate(invalid="ignore"):
            return lp_ + beta * np.where(np.isfinite(ll_), ll_, -np.inf)

    accepted = 0
    prob_sum = 0.0
    for _ in range(steps):
        # per-particle jitter on the step size and trajectory length avoids periodic orbits
        h = eps * rng.uniform(0.8, 1.2, size=n)[:, None]
        n_leap = int(rng.integers(max(1, leapfrog // 2), leapfrog + 1))
        p0 = rng.standard_normal((n, d))
        p = p0 + 0.5 * h * ((glp + beta * gll) @ chol)
        x = u.copy()
        # divergent trajectories overflow; they are rejected below
        with np.errstate(all="ignore"):
            for k in range(n_leap):
                x = x + (h * p) @ chol.T
                lp_n, ll_n, glp_n, gll_n = target.gradients(x)
                grad_w = (glp_n + beta * gll_n) @ chol
                p = p + (h if k < n_leap - 1 else 0.5 * h) * grad_w
        with np.errstate(invalid="ignore", over="ignore"):
            log_ratio = energy(lp_n, ll_n) - 0.5 * np.sum(p * p, axis=1) - energy(lp, ll) + 0.5 * np.sum(p0 * p0, axis=1)
        ok = np.isfinite(log_ratio) & np.isfinite(lp_n) & np.isfinite(ll_n)
        log_ratio = np.where(ok, log_ratio, -np.inf)
        prob_sum += float(np.mean(np.exp(np.minimum(log_ratio, 0.0))))
        accept = np.log(rng.uniform(size=n)) < log_ratio
        u = np.where(accept[:, None], x, u)
        lp = np.where(accept, lp_n, lp)
        ll = np.where(accept, ll_n, ll)
        glp = np.where(accept[:, None], glp_n, glp)
        gll = np.where(accept[:, None], gll_n, gll)
        accepted += int(accept.sum())
    return u, lp, ll, glp, gll, accepted / (n * steps), prob_sum / steps


def initialize(target: Target, config: SmcConfig, rng: np.random.Generator):
    """Stage-0 ensemble: prior draws with their densities."""
    u = target.sample_prior(rng, config.particles)
    lp, ll = target.log_densities(u)
    return u, lp, ll


def smc_sample(target: Target, config: SmcConfig, rng: np.random.Generator | None = None) -> ParticleEnsemble:
    """Run adaptive-tempering SMC on an arbitrary target."""
    if rng is None:
        rng = make_rng(config.seed, config.code)
    n = config.particles
    u, lp, ll = initialize(target, config, rng)
    hmc = config.kernel == "hmc" and target.dim > 0
    if hmc:
        lp, ll, glp, gll = target.gradients(u)
        eps = 1.0 / max(target.dim, 1) ** 0.25
    beta = 0.0
    betas = [0.0]
    log_z = 0.0
    incs: list[float] = []
    acc_hist: list[float] = []
    ess_hist: list[float] = []
    flags: list[str] = []
    weights = np.full(n, 1.0 / n)
    for stage in range(config.max_stages):
        if not np.any(np.isfinite(ll)):
            raise DegeneratePosteriorError(
                f"structure {config.code or '?'}: every particle has zero likelihood at beta={beta:.6g}"
            )
        delta = _next_delta(ll, 1.0 - beta, config.ess_target)
        new_beta = 1.0 if beta + delta >= 1.0 - 1e-15 else beta + delta
        delta = new_beta - beta
        with np.errstate(invalid="ignore"):
            logw = np.where(np.isfinite(ll), delta * ll, -np.inf)
        inc = float(logsumexp(logw) - np.log(n))
        incs.append(inc)
        log_z += inc
        weights = np.exp(logw - logsumexp(logw))
        weights /= weights.sum()
        ess_hist.append(effective_sample_size(weights))
        beta = new_beta
        betas.append(beta)
        if beta == 1.0 and not config.final_resample:
            break
        idx = systematic_resample(weights, rng)
        u, lp, ll = u[idx], lp[idx], ll[idx]
        weights = np.full(n, 1.0 / n)
        if hmc:
            glp, gll = glp[idx], gll[idx]
            u, lp, ll, glp, gll, acc, mean_prob = _mutate_hmc(
                target, u, lp, ll, glp, gll, beta, config.mutation_steps, rng, eps, config.leapfrog_steps
            )
            eps *= float(np.exp(np.clip(2.0 * (mean_prob - config.target_acceptance), -1.0, 0.5)))
        else:
            u, lp, ll, acc = _mutate(target, u, lp, ll, beta, config.mutation_steps, rng, config.proposal_scale)
        acc_hist.append(acc)
        if not 0.05 <= acc <= 0.95:
            flags.append(f"stage {stage + 1}: acceptance {acc:.3f} outside [0.05, 0.95]")
        log.debug("stage %d beta=%.6g acc=%.3f logZ=%.6f", stage + 1, beta, acc, log_z)
        if beta == 1.0:
            break
    else:
        raise NonConvergenceError(
            f"structure {config.code or '?'}: beta reached {beta:.6g} after {config.max_stages} stages",
            diagnostics={"beta_schedule": betas, "acceptance": acc_hist, "log_evidence_partial": log_z},
        )
    if not np.isfinite(log_z):
        raise DegeneratePosteriorError(f"structure {config.code or '?'}: log evidence is not finite")
    return ParticleEnsemble(
        code=config.code,
        names=list(target.names),
        theta=target.constrain(u),
        u=u,
        weights=weights,
        log_likelihood=ll,
        beta_schedule=betas,
        log_evidence=float(log_z),
        log_evidence_increments=incs,
        acceptance=acc_hist,
        ess_history=ess_hist,
        config=config,
        flags=flags,
    )


def run_smc(
    prior: RestrictedPrior,
    dataset: Dataset,
    structure: NetworkStructure,
    policy: MissingRecordPolicy | None,
    config: SmcConfig,
) -> ParticleEnsemble:
    """Posterior particles and log evidence for one candidate structure."""
    if prior.structure is not structure and prior.structure.code != structure.code:
        raise ConfigError(f"prior restricted to {prior.structure.code}, structure is {structure.code}")
    if config.code != str(structure.code):
        config = SmcConfig(**{**config.to_dict(), "code": str(structure.code)})
    model = LikelihoodModel(structure, dataset, policy)
    target = MFATarget(prior, model)
    ens = smc_sample(target, config)
    ens.applicable_records = model.record_ids
    return ens
