"""Gaussian-process Bayesian optimisation over the normalised parameter cube.

The surrogate is an exact GP with an ARD Matern-5/2 kernel; candidates are
chosen by closed-form expected improvement (maximisation). The estimation
loop minimises the similarity-map distance between simulated candidates and
a target sequence by maximising its negation.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import ndtr

from .errors import ConfigError, FabricPhysError, InvalidInputError, NumericError

log = logging.getLogger(__name__)

SQRT5 = math.sqrt(5.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------- parameters

class ParamSpace:
    """Affine map between physical intervals and [-1, 1]^d."""

    def __init__(self, bounds, names=None):
        self.bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
        if np.any(self.bounds[:, 1] <= self.bounds[:, 0]):
            raise ConfigError("every search interval must be non-empty")
        self.names = tuple(names) if names else tuple(f"x{i}" for i in range(len(self.bounds)))

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def normalize(self, x) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return 2.0 * (np.asarray(x, dtype=float) - lo) / (hi - lo) - 1.0

    def denormalize(self, z) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return lo + (np.asarray(z, dtype=float) + 1.0) * 0.5 * (hi - lo)

    def vector(self, z) -> "ParamVector":
        z = np.clip(np.asarray(z, dtype=float), -1.0, 1.0)
        return ParamVector(self.names, z, self.denormalize(z))


@dataclass(frozen=True)
class ParamVector:
    names: tuple
    normalized: np.ndarray
    physical: np.ndarray

    def as_dict(self) -> dict:
        return {n: float(v) for n, v in zip(self.names, self.physical)}


def negate_objective(psd_value: float) -> float:
    """Distances are minimised by maximising their negation; the optimum is 0."""
    if psd_value < 0:
        raise InvalidInputError("a similarity distance cannot be negative")
    return -float(psd_value)


# ---------------------------------------------------------------- GP surrogate

@dataclass(frozen=True)
class KernelConfig:
    lengthscales: tuple = (0.5, 0.5, 0.5)
    signal_var: float = 1.0
    noise_var: float = 1e-6
    fit: bool = True  # refit hyperparameters by maximising the log marginal likelihood
    n_restarts: int = 4
    normalize_y: bool = True
    lengthscale_bounds: tuple = (0.05, 10.0)
    signal_bounds: tuple = (0.05, 20.0)
    noise_bounds: tuple = (1e-8, 1e-1)


def matern52(X1, X2, lengthscales, signal_var) -> np.ndarray:
    d = (np.asarray(X1)[:, None, :] - np.asarray(X2)[None, :, :]) / np.asarray(lengthscales)
    r = np.sqrt(np.maximum(np.einsum("ijk,ijk->ij", d, d), 0.0))
    return signal_var * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * np.exp(-SQRT5 * r)


@dataclass
class GPState:
    X: np.ndarray
    y: np.ndarray  # raw objectives (negated distances)
    lengthscales: np.ndarray
    signal_var: float
    noise_var: float
    y_mean: float
    y_scale: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def best_y(self) -> float:
        return float(self.y.max())


def _cholesky(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating diagonal jitter if needed."""
    scale = float(np.mean(np.diag(K))) or 1.0
    for jitter in (0.0, 1e-12, 1e-10, 1e-8, 1e-6):
        try:
            return np.linalg.cholesky(K + jitter * scale * np.eye(len(K))), jitter * scale
        except np.linalg.LinAlgError:
            continue
    raise NumericError("kernel matrix is not positive definite even with jitter")


def _neg_lml_and_grad(theta, X, y, dim):
    ls = np.exp(theta[:dim])
    s = math.exp(theta[dim])
    noise = math.exp(theta[dim + 1])
    n = len(X)
    diff = (X[:, None, :] - X[None, :, :]) / ls
    sq = diff ** 2
    r = np.sqrt(sq.sum(-1))
    e = np.exp(-SQRT5 * r)
    M = (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * e
    K = s * M + noise * np.eye(n)
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return 1e25, np.zeros_like(theta)
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi)
    W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(n))
    grad = np.empty_like(theta)
    base = s * 5.0 / 3.0 * (1.0 + SQRT5 * r) * e
    for k in range(dim):
        grad[k] = 0.5 * np.sum(W * (base * sq[:, :, k]))
    grad[dim] = 0.5 * np.sum(W * (s * M))
    grad[dim + 1] = 0.5 * noise * np.trace(W)
    return -lml, -grad


def log_marginal_likelihood(X, y, lengthscales, signal_var, noise_var) -> tuple[float, np.ndarray]:
    """LML and its gradient w.r.t. (log lengthscales, log signal var, log noise var)."""
    X = np.asarray(X, dtype=float)
    theta = np.concatenate([np.log(lengthscales), [math.log(signal_var), math.log(noise_var)]])
    v, g = _neg_lml_and_grad(theta, X, np.asarray(y, dtype=float), X.shape[1])
    return -v, -g


def gp_fit(X, y, config: KernelConfig = KernelConfig(), rng: np.random.Generator | None = None) -> GPState:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(X) != len(y) or len(y) == 0:
        raise InvalidInputError("gp_fit needs matching, non-empty X and y")
    if np.any(np.abs(X) > 1.0 + 1e-12):
        raise InvalidInputError("inputs must lie in [-1, 1]^d")
    dim = X.shape[1]
    ls = np.asarray(config.lengthscales, dtype=float).ravel()
    if ls.size != dim:
        if ls.size == 0 or np.any(ls != ls[0]):
            raise ConfigError(f"{ls.size} lengthscales given for a {dim}-D space")
        ls = np.full(dim, ls[0])
    s, noise = float(config.signal_var), float(config.noise_var)
    if config.normalize_y:
        y_mean = float(y.mean())
        y_scale = float(y.std()) if len(y) > 1 and y.std() > 0 else 1.0
    else:
        y_mean, y_scale = 0.0, 1.0
    ys = (y - y_mean) / y_scale

    if config.fit and len(y) >= 2:
        rng = rng if rng is not None else np.random.default_rng(0)
        lb = np.log([config.lengthscale_bounds[0]] * dim + [config.signal_bounds[0], config.noise_bounds[0]])
        ub = np.log([config.lengthscale_bounds[1]] * dim + [config.signal_bounds[1], config.noise_bounds[1]])
        start0 = np.clip(np.log(np.concatenate([ls, [s, max(noise, config.noise_bounds[0])]])), lb, ub)
        starts = [start0] + [rng.uniform(lb, ub) for _ in range(config.n_restarts)]
        best = None
        for t0 in starts:
            res = minimize(_neg_lml_and_grad, t0, args=(X, ys, dim), jac=True,
                           method="L-BFGS-B", bounds=list(zip(lb, ub)))
            if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
                best = res
        if best is not None:
            ls = np.exp(best.x[:dim])
            s = float(np.exp(best.x[dim]))
            noise = float(np.exp(best.x[dim + 1]))

    K = matern52(X, X, ls, s) + noise * np.eye(len(X))
    L, jitter = _cholesky(K)
    alpha = cho_solve((L, True), ys)
    return GPState(X, y, ls, s, noise, y_mean, y_scale, L, alpha, jitter)


def gp_posterior(state: GPState, x) -> tuple[np.ndarray, np.ndarray]:
    """Latent-function mean and variance (>= 0) at one point or a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    ks = matern52(xs, state.X, state.lengthscales, state.signal_var)
    mean = state.y_mean + state.y_scale * (ks @ state.alpha)
    v = solve_triangular(state.chol, ks.T, lower=True)
    var = state.signal_var - np.einsum("ij,ij->j", v, v)
    var = np.where(var < 1e-10 * state.signal_var, 0.0, var) * state.y_scale ** 2
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def expected_improvement(state: GPState, x, best_y: float | None = None):
    """E[max(0, f(x) - best_y)] under the posterior."""
    best_y = state.best_y if best_y is None else best_y
    mean, var = gp_posterior(state, x)
    mean, var = np.asarray(mean, dtype=float), np.asarray(var, dtype=float)
    sigma = np.sqrt(var)
    gain = mean - best_y
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, gain / np.where(sigma > 0, sigma, 1.0), 0.0)
    ei = np.where(sigma > 0,
                  gain * ndtr(z) + sigma * INV_SQRT_2PI * np.exp(-0.5 * z * z),
                  np.maximum(gain, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def propose_next(state: GPState, rng: np.random.Generator, space: ParamSpace | None = None,
                 best_y: float | None = None, n_candidates: int = 1024,
                 n_starts: int = 8) -> ParamVector:
    """Maximise EI over the cube: random candidates, then coordinate search from the best few."""
    dim = state.X.shape[1]
    space = space or ParamSpace([(-1.0, 1.0)] * dim)
    best_y = state.best_y if best_y is None else best_y
    cand = rng.uniform(-1.0, 1.0, size=(n_candidates, dim))
    ei = expected_improvement(state, cand, best_y)
    if not np.any(ei > 0):
        # flat acquisition: fall back to the most uncertain candidate
        _, var = gp_posterior(state, cand)
        return space.vector(cand[int(np.argmax(var))])
    order = np.argsort(-ei, kind="stable")[:n_starts]
    best_x, best_ei = cand[order[0]], ei[order[0]]
    eye = np.eye(dim)
    for i in order:
        x, fx = cand[i].copy(), ei[i]
        step = 0.25
        while step >= 1e-3:
            trial = np.clip(np.concatenate([x + step * eye, x - step * eye]), -1.0, 1.0)
            vals = expected_improvement(state, trial, best_y)
            j = int(np.argmax(vals))
            if vals[j] > fx:
                x, fx = trial[j], vals[j]
            else:
                step *= 0.5
        if fx > best_ei:
            best_x, best_ei = x, fx
    return space.vector(best_x)


# ---------------------------------------------------------------- loop

@dataclass
class BOTrace:
    iterations: list[dict] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def incumbents(self) -> list[np.ndarray]:
        return [np.asarray(it["best_x"]) for it in self.iterations]

    @property
    def best(self) -> dict:
        return self.iterations[-1]

    def to_jsonl(self) -> str:
        rows = [json.dumps(it, sort_keys=True) for it in self.iterations]
        rows.append(json.dumps({"stop_reason": self.stop_reason}, sort_keys=True))
        return "\n".join(rows) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "BOTrace":
        trace = cls()
        for line in Path(path).read_text().splitlines():
            row = json.loads(line)
            if "stop_reason" in row and len(row) == 1:
                trace.stop_reason = row["stop_reason"]
            else:
                trace.iterations.append(row)
        return trace


def stop_check(trace, tolerance: float = 0.10, floor: float = 0.05, window: int = 3) -> bool:
    """True once every coordinate of the incumbent changed by at most ``tolerance``
    (relative, denominator floored at ``floor``) over each of the last ``window`` steps."""
    incumbents = trace.incumbents if isinstance(trace, BOTrace) else [np.asarray(x, dtype=float) for x in trace]
    if len(incumbents) < window + 1:
        return False
    inc = np.atleast_2d(np.array(incumbents[-(window + 1):], dtype=float).reshape(window + 1, -1))
    prev, cur = inc[:-1], inc[1:]
    rel = np.abs(cur - prev) / np.maximum(np.abs(prev), floor)
    return bool(np.all(rel <= tolerance + 1e-12))


@dataclass(frozen=True)
class BOConfig:
    budget: int = 50
    kernel: KernelConfig = field(default_factory=KernelConfig)
    n_candidates: int = 1024
    n_starts: int = 8
    use_stop_rule: bool = True
    min_iterations: int = 10
    failure_penalty: float = -1e6
    seed: int = 0

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "BOConfig":
        d = dict(d)
        kernel = KernelConfig(**{k: tuple(v) if isinstance(v, list) else v
                                 for k, v in d.pop("kernel", {}).items()})
        return cls(kernel=kernel, **d)


def maximize(objective: Callable[[np.ndarray], float], space: ParamSpace, config: BOConfig,
             x0=None, on_iteration: Callable[[dict], None] | None = None) -> BOTrace:
    """Sequential BO. ``objective`` receives physical parameters.

    Starts at ``x0`` (normalised, default the cube centre). A
    ``FabricPhysError`` from the objective records ``config.failure_penalty``;
    the GP sees the worst successful value instead so the penalty does not
    flatten the surrogate.
    """
    if config.budget < 1:
        raise ConfigError("budget must be >= 1")
    rng = np.random.default_rng(config.seed)
    trace = BOTrace()
    X, y, failed = [], [], []
    z = np.zeros(space.dim) if x0 is None else np.asarray(x0, dtype=float)
    for it in range(config.budget):
        pv = space.vector(z)
        try:
            value = float(objective(pv.physical))
            ok = True
        except FabricPhysError as exc:
            log.warning("evaluation %d failed: %s", it, exc)
            value, ok = config.failure_penalty, False
        X.append(pv.normalized)
        y.append(value)
        failed.append(not ok)
        k = int(np.argmax(y))
        row = {
            "iteration": it,
            "x": pv.normalized.tolist(),
            "params": pv.physical.tolist(),
            "objective": value,
            "failed": not ok,
            "best_objective": y[k],
            "best_x": X[k].tolist(),
            "best_params": space.denormalize(X[k]).tolist(),
        }
        trace.iterations.append(row)
        if on_iteration:
            on_iteration(row)
        if config.use_stop_rule and it + 1 >= config.min_iterations and stop_check(trace):
            trace.stop_reason = "converged"
            return trace
        if it + 1 == config.budget:
            break
        y_fit = np.array(y)
        good = ~np.array(failed)
        if good.any() and not good.all():
            y_fit[~good] = y_fit[good].min()
        state = gp_fit(np.array(X), y_fit, config.kernel, rng)
        z = propose_next(state, rng, best_y=float(y_fit.max()),
                         n_candidates=config.n_candidates, n_starts=config.n_starts).normalized
    trace.stop_reason = "budget"
    return trace


@dataclass
class EstimateResult:
    params: ParamVector
    trace: BOTrace
    target_point: tuple

    def to_dict(self) -> dict:
        return {"params": self.params.as_dict(), "normalized": self.params.normalized.tolist(),
                "iterations": len(self.trace.iterations), "stop_reason": self.trace.stop_reason,
                "best_objective": self.trace.best["best_objective"],
                "target_point": list(self.target_point)}


def estimate(target_frames, camera, material, net, scene, config: BOConfig = BOConfig(),
             on_iteration=None) -> EstimateResult:
    """Recover (stiffness scale, wind speed, area weight) for a target depth sequence.

    Each evaluation simulates the candidate, renders it from the target's
    camera, embeds the sequence and scores the negated distance between the
    sequence centroids on the similarity map.
    """
    from .embed import embed_sequence, psd
    from .materials import PARAM_NAMES, search_bounds
    from .scene import normalized_sequence, render_sequence, simulate_params

    if config.budget < 4:
        raise ConfigError("estimation budget must be >= 4")
    target_frames = np.asarray(target_frames, dtype=np.float32)
    scene = scene.with_frames(len(target_frames))
    target_point = embed_sequence(net, target_frames)
    space = ParamSpace(search_bounds(material), PARAM_NAMES)

    def objective(params):
        snaps = simulate_params(material, *params, scene)
        frames = normalized_sequence(render_sequence(snaps, camera, scene.render), scene.render)
        return negate_objective(psd(embed_sequence(net, frames), target_point))

    trace = maximize(objective, space, config, on_iteration=on_iteration)
    best = space.vector(trace.best["best_x"])
    return EstimateResult(best, trace, tuple(target_point))
