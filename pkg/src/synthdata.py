"""
Seeded synthetic federated datasets.

Client k (0-based) draws covariates from N(s_k * gamma, alpha_k I_d) and outcomes
y = f(x) + s_k * delta + sigma * eps, with s_k = (-1)^(k+1). The held-out test set is
drawn from the client mixture with weights n_k / n.

Scenario presets (unset knobs take these values):

    homogeneous       gamma=0  alpha=1    delta=0
    covariate_shift   gamma=3  alpha=0.5  delta=0
    outcome_shift     gamma=0  alpha=1    delta=1.5
    full_hetero       gamma=3  alpha=0.5  delta=1.5
    disjoint_step     gamma=5  alpha=1    shift on x0 only, f(x) = 10 * 1{x0 > 0}
    overlap_linear    gamma=2  alpha=2.25 f(x) = x0
"""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from baselines import fit_cart
from client import ClientShard
from errors import ConfigError
from forest import Forest
from models import ScenarioConfig
from seeding import open_uniform, rng_for, standard_normal

logger = logging.getLogger(__name__)

AUX_LOW, AUX_HIGH = -10.0, 10.0

PRESETS: Dict[str, Dict[str, float]] = {
    "homogeneous": {"gamma": 0.0, "alpha": 1.0, "delta": 0.0},
    "covariate_shift": {"gamma": 3.0, "alpha": 0.5, "delta": 0.0},
    "outcome_shift": {"gamma": 0.0, "alpha": 1.0, "delta": 1.5},
    "full_hetero": {"gamma": 3.0, "alpha": 0.5, "delta": 1.5},
    "disjoint_step": {"gamma": 5.0, "alpha": 1.0, "delta": 0.0},
    "overlap_linear": {"gamma": 2.0, "alpha": 1.5 ** 2, "delta": 0.0},
}


# ─── Ground truth ────────────────────────────────────────────────────────────

def psi_step(z):
    return (np.asarray(z) > 0.5).astype(np.float64)


def psi_wave(z):
    return np.sin(4.0 * math.pi * np.asarray(z, dtype=np.float64))


def psi_interaction(x_tilde: np.ndarray, j: int) -> np.ndarray:
    """x~_j * x~_{(j mod d)+1} for 1-based j"""
    d = x_tilde.shape[1]
    return x_tilde[:, j - 1] * x_tilde[:, j % d]


def auxiliary_target(x_tilde: np.ndarray) -> np.ndarray:
    y = np.zeros(x_tilde.shape[0])
    for j in range(1, x_tilde.shape[1] + 1):
        kind = j % 3
        if kind == 0:
            y += psi_step(x_tilde[:, j - 1])
        elif kind == 1:
            y += psi_wave(x_tilde[:, j - 1])
        else:
            y += psi_interaction(x_tilde, j)
    return y


@dataclass
class GroundTruthF:
    """Frozen regression tree fitted on [-10, 10]^d"""
    tree: Forest
    seed: int

    def __call__(self, X) -> np.ndarray:
        return self.tree.predict(np.asarray(X, dtype=np.float64))

    @property
    def n_features(self) -> int:
        return self.tree.n_features


@lru_cache(maxsize=8)
def distill_f(d: int, seed: int, n_aux: int = 10_000, depth: int = 8) -> GroundTruthF:
    if d < 2:
        raise ConfigError("the distilled regression function needs d >= 2")
    rng = rng_for(seed, "data", "aux")
    x_aux = AUX_LOW + (AUX_HIGH - AUX_LOW) * open_uniform(rng, (n_aux, d))
    x_tilde = (x_aux - AUX_LOW) / (AUX_HIGH - AUX_LOW)
    y_aux = auxiliary_target(x_tilde)
    tree = fit_cart(x_aux, y_aux, max_depth=depth, min_leaf=1, seed=seed)
    logger.info("distilled f: d=%d, %d leaves", d, tree.trees[0].leaf_count)
    return GroundTruthF(tree, seed)


def step_f(X) -> np.ndarray:
    return 10.0 * (np.asarray(X)[:, 0] > 0)


def linear_f(X) -> np.ndarray:
    return np.asarray(X, dtype=np.float64)[:, 0].copy()


# ─── Generation ──────────────────────────────────────────────────────────────

@dataclass
class HeldOutSet:
    X: np.ndarray
    y: np.ndarray
    sites: np.ndarray

    @property
    def n_rows(self) -> int:
        return int(self.X.shape[0])


@dataclass
class ResolvedScenario:
    gamma: float
    alphas: List[float]
    delta: float


def resolve(cfg: ScenarioConfig) -> ResolvedScenario:
    preset = PRESETS[cfg.scenario]
    gamma = preset["gamma"] if cfg.gamma is None else cfg.gamma
    delta = preset["delta"] if cfg.delta is None else cfg.delta
    if not cfg.alpha:
        alphas = [preset["alpha"]] * cfg.num_clients
    elif len(cfg.alpha) == 1:
        alphas = list(cfg.alpha) * cfg.num_clients
    else:
        alphas = list(cfg.alpha)
    return ResolvedScenario(gamma, alphas, delta)


def client_sign(k: int) -> float:
    return -1.0 if k % 2 == 0 else 1.0


def _client_mean(cfg: ScenarioConfig, gamma: float, k: int) -> np.ndarray:
    mean = np.zeros(cfg.num_features)
    if cfg.scenario == "disjoint_step":
        mean[0] = client_sign(k) * gamma
    else:
        mean[:] = client_sign(k) * gamma
    return mean


def _draw(cfg: ScenarioConfig, spec: ResolvedScenario, f: Callable, k: int, n: int, stream: str):
    rng = rng_for(cfg.seed, "data", stream, k)
    X = _client_mean(cfg, spec.gamma, k) + math.sqrt(spec.alphas[k]) * standard_normal(rng, (n, cfg.num_features))
    noise = standard_normal(rng, n)
    y = f(X) + client_sign(k) * spec.delta + cfg.sigma * noise
    return X, y


def ground_truth_for(cfg: ScenarioConfig, f: Optional[Callable] = None) -> Callable:
    if cfg.scenario == "disjoint_step":
        return step_f
    if cfg.scenario == "overlap_linear":
        return linear_f
    if f is None:
        return distill_f(cfg.num_features, cfg.f_seed, n_aux=cfg.n_aux, depth=cfg.f_depth)
    return f


def held_out_size(n_train: int, fraction: float) -> int:
    return int(round(n_train * fraction / (1.0 - fraction)))


def generate(cfg: ScenarioConfig, f: Optional[Callable] = None) -> Tuple[List[ClientShard], HeldOutSet]:
    """Client shards of exactly n_k rows plus a mixture-drawn held-out test set"""
    spec = resolve(cfg)
    f = ground_truth_for(cfg, f)
    sizes = cfg.client_sizes()

    train = [_draw(cfg, spec, f, k, n_k, "train") for k, n_k in enumerate(sizes)]

    n_test = held_out_size(sum(sizes), cfg.test_fraction)
    weights = np.asarray(sizes, dtype=np.float64) / sum(sizes)
    assign = rng_for(cfg.seed, "data", "test-assign").choice(cfg.num_clients, size=n_test, p=weights)
    X_test = np.zeros((n_test, cfg.num_features))
    y_test = np.zeros(n_test)
    for k in range(cfg.num_clients):
        rows = np.nonzero(assign == k)[0]
        if rows.size:
            X_test[rows], y_test[rows] = _draw(cfg, spec, f, k, rows.size, "test")

    if cfg.task == "classification":
        threshold = float(np.median(np.concatenate([y for _, y in train])))
        train = [(X, (y > threshold).astype(np.int64)) for X, y in train]
        y_test = (y_test > threshold).astype(np.int64)

    shards = [ClientShard(k, X, y) for k, (X, y) in enumerate(train)]
    logger.info(
        "generated %s: %d clients, %d train rows, %d test rows",
        cfg.scenario, cfg.num_clients, sum(sizes), n_test,
    )
    return shards, HeldOutSet(X_test, y_test, assign.astype(np.int64))
