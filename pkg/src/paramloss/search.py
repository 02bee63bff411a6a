"""Outer-loop search over loss parameters.

Bi-level scheme: the inner level trains the toy detector under a candidate
parameter set; the outer level treats the evaluation AP of the trained
detector as a reward and ascends the mean of a truncated-normal sampling
distribution with a PPO2 clipped-surrogate update. A same-budget random
search provides the baseline curve.

All randomness is routed through named seed streams derived from the master
seed, round index and sample index, so serial and parallel execution
produce identical histories.
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from . import toybench
from .errors import (
    ConfigError,
    ConstraintViolationError,
    InvalidInputError,
    TrainingDivergedError,
)
from .geometry import MEASUREMENTS
from .optim import Adam
from .paploss import LossParams

PROJECTION_MARGIN = 1e-4
_EPS = np.finfo(float).eps

# bundled settings: "desk" fits a full comparison suite in minutes on a
# laptop, "paper" mirrors the original search budget
PRESETS = {
    "desk": {"T": 15, "S": 4, "steps": 300},
    "paper": {"T": 40, "S": 8, "steps": 300},
}


@dataclass(frozen=True, eq=False)
class SearchConfig:
    """Outer-search settings plus the inner-training knobs they drive."""

    T: int = 40
    S: int = 8
    sigma0: float = 0.2
    epsilon: float = 0.1
    inner_iterations: int = 100
    inner_lr: float = 0.01
    inner_warmup: int = 30
    M: int = 5
    measurement: str = "giou"
    steps: int = 300
    seed: int = 0
    dataset: str | None = None
    block_denominator: bool = True

    def __post_init__(self):
        if self.T < 1 or self.S < 1:
            raise ConfigError("T and S must be at least 1")
        # sigma0 = 0 is the degenerate no-exploration search, kept legal
        if not (np.isfinite(self.sigma0) and self.sigma0 >= 0.0):
            raise ConfigError("sigma0 must be a finite non-negative real")
        if not (0.0 < self.epsilon < 1.0):
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.inner_iterations < 1 or self.inner_warmup < 1:
            raise ConfigError("Adam iteration counts must be at least 1")
        if self.inner_warmup > self.inner_iterations:
            raise ConfigError("warmup cannot exceed the iteration count")
        if self.inner_lr <= 0.0:
            raise ConfigError("inner Adam step size must be positive")
        if self.M < 2:
            raise ConfigError("M must be at least 2")
        if self.measurement not in MEASUREMENTS:
            raise ConfigError(f"unknown measurement {self.measurement!r}")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")

    def to_json_dict(self) -> dict:
        return {"T": self.T, "S": self.S, "sigma0": self.sigma0,
                "epsilon": self.epsilon, "inner_iterations": self.inner_iterations,
                "inner_lr": self.inner_lr, "inner_warmup": self.inner_warmup,
                "M": self.M, "measurement": self.measurement, "steps": self.steps,
                "seed": self.seed, "dataset": self.dataset,
                "block_denominator": self.block_denominator}

    @classmethod
    def from_json_dict(cls, data: dict) -> "SearchConfig":
        defaults = cls()
        known = set(defaults.to_json_dict())
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown search config keys: {sorted(unknown)}")
        merged = defaults.to_json_dict()
        merged.update(data)
        return cls(**merged)


def sample_truncnorm(mu: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Per-component normal(mu_c, sigma^2) truncated to [0, 1], inverse-CDF.

    sigma = 0 degenerates to mu. Samples landing exactly on 0 or 1 are
    nudged inward by a machine-epsilon margin so downstream open-interval
    constraints hold.
    """
    mu = np.asarray(mu, dtype=float)
    if np.any(mu <= 0.0) or np.any(mu >= 1.0):
        raise InvalidInputError("mu components must lie strictly inside (0, 1)")
    if sigma < 0.0:
        raise InvalidInputError("sigma must be non-negative")
    if sigma == 0.0:
        return mu.copy()
    lo = ndtr(-mu / sigma)
    hi = ndtr((1.0 - mu) / sigma)
    u = rng.uniform(lo, hi)
    x = mu + sigma * ndtri(u)
    return np.clip(x, _EPS, 1.0 - _EPS)


def truncnorm_logpdf(x: np.ndarray, mu: np.ndarray, sigma: float) -> np.ndarray:
    """Per-component log-density of the [0,1]-truncated normal."""
    if sigma <= 0.0:
        raise InvalidInputError("sigma must be positive")
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise InvalidInputError("x components must lie in [0, 1]")
    z = (x - mu) / sigma
    normalizer = ndtr((1.0 - mu) / sigma) - ndtr(-mu / sigma)
    return -0.5 * z**2 - 0.5 * np.log(2.0 * np.pi) - np.log(sigma) - np.log(normalizer)


def _dlogpdf_dmu(x: np.ndarray, mu: np.ndarray, sigma: float) -> np.ndarray:
    # d/dmu log p = (x - E[X_trunc]) / sigma^2, with the truncated mean
    # mu + sigma (phi(lo) - phi(hi)) / Z
    lo = -mu / sigma
    hi = (1.0 - mu) / sigma
    phi = lambda t: np.exp(-0.5 * t**2) / np.sqrt(2.0 * np.pi)
    z_norm = ndtr(hi) - ndtr(lo)
    trunc_mean = mu + sigma * (phi(lo) - phi(hi)) / z_norm
    return (x - trunc_mean) / sigma**2


def clipped_surrogate_terms(rho: np.ndarray, advantage: np.ndarray,
                            epsilon: float) -> np.ndarray:
    """min(rho * A, clip(rho, 1-eps, 1+eps) * A), elementwise."""
    rho = np.asarray(rho, dtype=float)
    return np.minimum(rho * advantage, np.clip(rho, 1.0 - epsilon, 1.0 + epsilon) * advantage)


def ppo2_objective(thetas: np.ndarray, advantages: np.ndarray, mu: np.ndarray,
                   mu_t: np.ndarray, sigma: float, epsilon: float) -> float:
    """Clipped surrogate averaged over samples and components.

    Ratios are per-component truncated-normal density ratios between the
    candidate mean and the sampling mean; the clip is applied per component.
    Evaluated at mu = mu_t every ratio is 1 and the value is the mean
    advantage, which is exactly 0 after baseline subtraction.
    """
    thetas = np.asarray(thetas, dtype=float)
    log_rho = truncnorm_logpdf(thetas, mu, sigma) - truncnorm_logpdf(thetas, mu_t, sigma)
    rho = np.exp(log_rho)
    terms = clipped_surrogate_terms(rho, np.asarray(advantages)[:, None], epsilon)
    return float(terms.mean())


def _ppo2_grad(thetas: np.ndarray, advantages: np.ndarray, mu: np.ndarray,
               mu_t: np.ndarray, sigma: float, epsilon: float) -> np.ndarray:
    adv = np.asarray(advantages)[:, None]
    rho = np.exp(truncnorm_logpdf(thetas, mu, sigma) - truncnorm_logpdf(thetas, mu_t, sigma))
    # the unclipped branch is active wherever it attains the min; on the
    # flat clipped branch the derivative is zero
    active = rho * adv <= np.clip(rho, 1.0 - epsilon, 1.0 + epsilon) * adv
    d_rho = rho * _dlogpdf_dmu(thetas, mu, sigma)
    grads = np.where(active, adv * d_rho, 0.0)
    # each mu_c appears in one component term per sample; the objective
    # averages over samples and components
    return grads.mean(axis=0) / thetas.shape[1]


def ppo2_update(samples, rewards, mu_t: np.ndarray, sigma: float, epsilon: float,
                *, iterations: int = 100, base_lr: float = 0.01,
                warmup: int = 30) -> np.ndarray:
    """Ascend the clipped surrogate from mu_t; returns the projected mean.

    Adam with a step size ramping linearly from 0 over the first `warmup`
    iterations. All-equal rewards mean zero advantage everywhere, in which
    case mu_t is returned unchanged.
    """
    thetas = np.asarray(samples, dtype=float)
    rewards = np.asarray(rewards, dtype=float)
    if thetas.ndim != 2 or thetas.shape[0] != rewards.shape[0]:
        raise InvalidInputError("samples and rewards must agree on the sample count")
    if thetas.shape[0] < 2:
        raise InvalidInputError("the advantage baseline needs at least 2 samples")
    if sigma <= 0.0:
        raise InvalidInputError("sigma must be positive")
    advantages = rewards - rewards.mean()
    if np.all(advantages == 0.0):
        return np.asarray(mu_t, dtype=float).copy()

    mu = np.asarray(mu_t, dtype=float).copy()
    opt = Adam(mu.size, lr=base_lr)
    for k in range(iterations):
        grad = _ppo2_grad(thetas, advantages, mu, mu_t, sigma, epsilon)
        rate = base_lr * min(1.0, (k + 1) / warmup)
        mu = opt.step(mu, -grad, lr=rate)  # ascent
    return np.clip(mu, PROJECTION_MARGIN, 1.0 - PROJECTION_MARGIN)


def _train_seed(master: int, t: int, i: int) -> int:
    """Stable scalar seed for one inner training, distinct per (round, sample)."""
    return int(np.random.SeedSequence([master, t, i]).generate_state(1)[0])


def _evaluate_sample(args) -> tuple[float, bool, float]:
    """Train under one parameter set; diverged or unbuildable samples get 0."""
    (theta, train_set, eval_set, m, measurement, block, steps, seed) = args
    start = time.perf_counter()
    try:
        params = LossParams.from_flat(theta, M=m, measurement=measurement,
                                      block_denominator=block)
        model = toybench.train_inner(params, train_set, steps, seed)
        value = toybench.reward(model, eval_set)
        diverged = False
    except (TrainingDivergedError, ConstraintViolationError):
        value = 0.0
        diverged = True
    return value, diverged, (time.perf_counter() - start) * 1000.0


def _resolve_dataset(config: SearchConfig, dataset):
    if dataset is not None:
        return dataset
    if config.dataset is None:
        raise ConfigError("no dataset: pass one in memory or set the dataset path")
    _, train_set, eval_set = toybench.load_dataset(config.dataset)
    return train_set, eval_set


def _run_round_samples(pool, tasks):
    if pool is None:
        return [_evaluate_sample(t) for t in tasks]
    # map() yields results in submission order, keeping parallel runs
    # byte-identical to serial ones
    return list(pool.map(_evaluate_sample, tasks))


def run_search(config: SearchConfig, dataset=None, jobs: int = 1):
    """Truncated-normal sampling around an ascending mean (Algorithm: PPO2).

    Returns (best LossParams, history). The history carries one record per
    sample {round, sample_index, theta, reward, diverged, wall_ms} and one
    record per round {round, mu, sigma} holding the post-update mean.
    """
    train_set, eval_set = _resolve_dataset(config, dataset)
    mu = LossParams.identity(M=config.M, measurement=config.measurement,
                             block_denominator=config.block_denominator).to_flat()
    history = []
    best_theta, best_reward = None, -np.inf

    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        for t in range(1, config.T + 1):
            sigma_t = config.sigma0 * (1.0 - (t - 1) / config.T)
            thetas = [sample_truncnorm(mu, sigma_t, np.random.default_rng([config.seed, t, i]))
                      for i in range(config.S)]
            tasks = [(theta, train_set, eval_set, config.M, config.measurement,
                      config.block_denominator, config.steps, _train_seed(config.seed, t, i))
                     for i, theta in enumerate(thetas)]
            results = _run_round_samples(pool, tasks)

            rewards = []
            for i, (theta, (value, diverged, wall_ms)) in enumerate(zip(thetas, results)):
                rewards.append(value)
                history.append({"round": t, "sample_index": i, "theta": theta.tolist(),
                                "reward": value, "diverged": diverged, "wall_ms": wall_ms})
                if value > best_reward:
                    best_theta, best_reward = theta, value

            if config.S >= 2 and sigma_t > 0.0:
                mu = ppo2_update(np.stack(thetas), rewards, mu, sigma_t, config.epsilon,
                                 iterations=config.inner_iterations,
                                 base_lr=config.inner_lr, warmup=config.inner_warmup)
            history.append({"round": t, "mu": mu.tolist(), "sigma": sigma_t})
    finally:
        if pool is not None:
            pool.shutdown()

    best = LossParams.from_flat(best_theta, M=config.M, measurement=config.measurement,
                                block_denominator=config.block_denominator)
    return best, history


def random_search(config: SearchConfig, dataset=None, jobs: int = 1, budget=None):
    """Same-budget baseline: uniform samples over (0,1)^D, no mean update.

    Returns (best LossParams or None, history); the history has exactly
    `budget` sample records (default T*S) grouped into rounds of S.
    """
    if budget is None:
        budget = config.T * config.S
    if budget < 0:
        raise ConfigError("budget must be non-negative")
    if budget == 0:
        return None, []
    train_set, eval_set = _resolve_dataset(config, dataset)

    history = []
    best_theta, best_reward = None, -np.inf
    dim = LossParams.identity(M=config.M).to_flat().size

    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        done = 0
        t = 0
        while done < budget:
            t += 1
            n = min(config.S, budget - done)
            thetas = [np.clip(np.random.default_rng([config.seed, t, i]).uniform(size=dim),
                              _EPS, 1.0 - _EPS)
                      for i in range(n)]
            tasks = [(theta, train_set, eval_set, config.M, config.measurement,
                      config.block_denominator, config.steps, _train_seed(config.seed, t, i))
                     for i, theta in enumerate(thetas)]
            results = _run_round_samples(pool, tasks)
            for i, (theta, (value, diverged, wall_ms)) in enumerate(zip(thetas, results)):
                history.append({"round": t, "sample_index": i, "theta": theta.tolist(),
                                "reward": value, "diverged": diverged, "wall_ms": wall_ms})
                if value > best_reward:
                    best_theta, best_reward = theta, value
            done += n
    finally:
        if pool is not None:
            pool.shutdown()

    best = LossParams.from_flat(best_theta, M=config.M, measurement=config.measurement,
                                block_denominator=config.block_denominator)
    return best, history


def best_so_far_curve(history) -> list[tuple[int, float]]:
    """(round, best reward up to and including that round) from sample records."""
    per_round = {}
    for record in history:
        if "reward" in record:
            r = record["round"]
            per_round[r] = max(per_round.get(r, -np.inf), record["reward"])
    curve = []
    best = -np.inf
    for r in sorted(per_round):
        best = max(best, per_round[r])
        curve.append((r, best))
    return curve
