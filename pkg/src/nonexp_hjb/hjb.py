"""Collocation solver for the HJB equation with a time-varying hazard.

For a value approximator ``V`` the residual at ``(x, t)`` is

    E = -hazard(t) V + max_u Q(x, u, t),
    Q = R + V_t + V_x . f + 1/2 tr(V_xx G G^T),

and training minimizes the mean of ``E**2`` over uniformly sampled states and
exponentially sampled times.  For hyperbolic discounting the shape starts
inflated by ``anneal_offset_init`` and relaxes linearly to the target.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .discount import DiscountModel, Verdict, check_well_defined
from .tasks import TaskModel
from .valuenet import Adam, DerivativeBundle, ValueNet, loss_param_gradient

log = logging.getLogger(__name__)

#: Episode counts used for the full-scale benchmark runs.
FULL_EPISODES = {"investment": 125_000, "line": 100_000}


class DivergentObjective(ValueError):
    """The discounted objective is infinite for this discount/task pair."""


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; ``last_finite`` holds the last good network."""

    def __init__(self, msg, last_finite=None, episode=None):
        super().__init__(msg)
        self.last_finite = last_finite
        self.episode = episode


@dataclass
class SolverConfig:
    batch_size: int = 10_000
    episodes: int = 100_000
    lr: float = 0.003
    lr_final: float | None = None
    lam_reparam: float = 0.2
    anneal_offset_init: float = 50.0
    anneal_episodes: int = 50_000
    width: int = 64
    seed: int = 0
    precision: str = "float32"
    log_every: int = 0
    boundary_fraction: float = 0.1

    def __post_init__(self):
        for name in ("batch_size", "episodes", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr_final is not None and not self.lr_final > 0:
            raise ValueError("lr_final must be positive")
        for name in ("lr", "lam_reparam"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.anneal_offset_init < 0 or self.anneal_episodes < 0:
            raise ValueError("annealing settings must be nonnegative")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")
        if self.anneal_episodes > self.episodes:
            raise ValueError("anneal_episodes must not exceed episodes")
        if not 0.0 <= self.boundary_fraction <= 1.0:
            raise ValueError("boundary_fraction must lie in [0, 1]")

    @classmethod
    def full(cls, task_name: str, **kw) -> "SolverConfig":
        """Full-scale settings (10k samples, 100k-125k episodes)."""
        return cls(episodes=FULL_EPISODES.get(task_name, 100_000), **kw)

    @classmethod
    def desk(cls, episodes: int = 10_000, batch_size: int = 500, **kw) -> "SolverConfig":
        """Reduced settings that run in under a minute per task.

        The slower time reparametrization (``lam_reparam=0.5``) spreads the
        sampled times over a longer window, which matters more than batch
        size when few episodes are available.
        """
        kw.setdefault("anneal_episodes", episodes // 3)
        kw.setdefault("lam_reparam", 0.5)
        return cls(batch_size=batch_size, episodes=episodes, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown solver config field(s): {sorted(unknown)}")
        return cls(**d)


def learning_rate(config: SolverConfig, episode: int) -> float:
    """Constant rate, or a geometric decay to ``lr_final`` once annealing is over."""
    if config.lr_final is None or episode < config.anneal_episodes:
        return config.lr
    span = max(1, config.episodes - 1 - config.anneal_episodes)
    frac = min(1.0, (episode - config.anneal_episodes) / span)
    return config.lr * (config.lr_final / config.lr) ** frac


def anneal_offset(config: SolverConfig, episode: int) -> float:
    """Linear offset schedule, exactly zero from ``anneal_episodes`` on."""
    if config.anneal_episodes == 0 or episode >= config.anneal_episodes:
        return 0.0
    return config.anneal_offset_init * (1.0 - episode / config.anneal_episodes)


def q_from_bundle(bundle: DerivativeBundle, task: TaskModel, x) -> np.ndarray:
    """Per-action Q values, shape ``(B, n_actions)``, for a scalar bundle."""
    x = np.atleast_2d(x)
    rewards = task.reward_table(x)
    drift = task.effective_drift_table(x)
    adv = np.einsum("bn,ban->ba", bundle.grad_x, drift)
    diff = 0.5 * np.einsum("bkl,akl->ba", bundle.hess_xx, task.diffusion)
    return rewards + bundle.dV_dt[:, None] + adv + diff


def q_values(net: ValueNet, discount: DiscountModel, task: TaskModel, x, t) -> np.ndarray:
    """Q values for every action, shape ``(B, n_actions)``."""
    x = task.check_state(np.atleast_2d(x))
    bundle = net.eval_with_derivatives(x, t, pairs=task.hessian_pairs).squeeze()
    return q_from_bundle(bundle, task, x)


def _residual(bundle, discount, task, x, t):
    q = q_from_bundle(bundle, task, x)
    u_star = np.argmax(q, axis=1)  # first maximum: lowest index wins ties
    hazard = np.asarray(discount.hazard(t), dtype=float)
    e = -hazard * bundle.value + q[np.arange(len(q)), u_star]
    return e, u_star, hazard, q


def hjb_residual(net: ValueNet, discount: DiscountModel, task: TaskModel, x, t):
    """Residual ``E`` and maximizing action index at each point."""
    x = task.check_state(np.atleast_2d(x))
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:1])
    bundle = net.eval_with_derivatives(x, t, pairs=task.hessian_pairs).squeeze()
    e, u_star, _, _ = _residual(bundle, discount, task, x, t)
    return e, u_star


def policy(net: ValueNet, discount: DiscountModel, task: TaskModel, x, t) -> np.ndarray:
    """Greedy action index; ties go to the lowest action index."""
    return np.argmax(q_values(net, discount, task, x, t), axis=1)


def residual_loss_and_grad(net, discount, task, x, t):
    """Mean squared HJB residual and its gradient w.r.t. the net parameters."""
    bundle = net.eval_with_derivatives(x, t, pairs=task.hessian_pairs, keep_cache=True)
    sb = bundle.squeeze()
    e, u_star, hazard, _ = _residual(sb, discount, task, x, t)
    f = task.effective_drift_table(x)[np.arange(len(x)), u_star]
    coeffs = (-hazard * np.ones(len(x)), f, np.ones(len(x)), 0.5 * task.diffusion[u_star])
    return loss_param_gradient(net, bundle, e, coeffs)


@dataclass
class TrainResult:
    net: ValueNet
    loss_history: np.ndarray
    config: SolverConfig
    discount: DiscountModel
    task_name: str
    seconds: float = 0.0
    offsets: np.ndarray = field(default=None, repr=False)

    @property
    def final_loss(self) -> float:
        k = max(1, min(100, len(self.loss_history) // 10))
        return float(np.mean(self.loss_history[-k:]))


def ensure_well_defined(discount: DiscountModel, task: TaskModel) -> None:
    _, r_sup = task.reward_bounds()
    verdict = check_well_defined(discount, r_sup)
    if verdict != Verdict.WELL_DEFINED:
        raise DivergentObjective(
            f"divergent objective: {discount} with reward bound {r_sup:g} is {verdict.value}"
        )


def train(discount: DiscountModel, task: TaskModel, config: SolverConfig,
          net: ValueNet | None = None, callback=None) -> TrainResult:
    """Fit a value network to the HJB equation by residual minimization."""
    ensure_well_defined(discount, task)
    rng = np.random.default_rng(config.seed)
    if net is None:
        net = ValueNet(task.state_dim, config.width, 1, config.lam_reparam, rng=rng)
    opt = Adam(net.mlp.n_params, lr=config.lr)
    losses = np.empty(config.episodes)
    offsets = np.empty(config.episodes)
    anneal = discount.is_hyperbolic
    start = time.perf_counter()
    eval_dtype = net.mlp.dtype
    net.mlp.dtype = np.dtype(config.precision)
    try:
        _run_episodes(net, opt, discount, task, config, rng, anneal, losses, offsets, callback)
    finally:
        net.mlp.dtype = eval_dtype
    return TrainResult(net, losses, config, discount, task.name,
                       time.perf_counter() - start, offsets)


def _run_episodes(net, opt, discount, task, config, rng, anneal, losses, offsets, callback):
    for k in range(config.episodes):
        off = anneal_offset(config, k) if anneal else 0.0
        d_k = discount.with_offset(off)
        x, t, _ = task.sample_states(config.batch_size, config.lam_reparam, rng,
                                     config.boundary_fraction)
        last = net.params.copy()
        opt.lr = learning_rate(config, k)
        try:
            loss, grad = residual_loss_and_grad(net, d_k, task, x, t)
            opt.step(net.params, grad)
        except FloatingPointError as exc:
            net.params = last
            raise TrainingDiverged(f"training diverged at episode {k}: {exc}",
                                   last_finite=net, episode=k) from exc
        losses[k] = loss
        offsets[k] = off
        if config.log_every and k % config.log_every == 0:
            log.info("episode %d loss %.3e offset %.2f", k, loss, off)
        if callback is not None:
            callback(k, loss, net)


def evaluation_residual(net, discount, task, n=10_000, lam_reparam=None, seed=12345):
    """Mean ``|E|`` and mean ``E**2`` on a fresh sample batch."""
    rng = np.random.default_rng(seed)
    x, t, _ = task.sample_states(n, lam_reparam or net.lam_reparam, rng)
    e, _ = hjb_residual(net, discount, task, x, t)
    return float(np.mean(np.abs(e))), float(np.mean(e**2))


def state_grid(task: TaskModel, n: int | tuple = 101) -> list[np.ndarray]:
    ns = (n,) * task.state_dim if np.isscalar(n) else tuple(n)
    return [np.linspace(lo, hi, k) for lo, hi, k in zip(task.state_lo, task.state_hi, ns)]


def solution_grid(net, discount, task, axes, ts):
    """Value, Q and policy on the product of state ``axes`` and times ``ts``.

    Returns a dict of arrays indexed ``[*state_indices, t_index]`` (Q has a
    trailing action axis) together with the flattened points.
    """
    mesh = np.meshgrid(*axes, ts, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh[:-1]], axis=-1)
    tt = mesh[-1].ravel()
    shape = mesh[0].shape
    vals = net.value(pts, tt)
    q = q_values(net, discount, task, pts, tt)
    return {
        "x": pts, "t": tt,
        "V": vals.reshape(shape),
        "Q": q.reshape(shape + (task.n_actions,)),
        "policy": np.argmax(q, axis=1).reshape(shape),
    }


class NetSolution:
    """Adapter exposing ``value``/``q``/``policy`` for a trained network."""

    def __init__(self, net: ValueNet, discount: DiscountModel, task: TaskModel):
        self.net, self.discount, self.task = net, discount, task

    def value(self, x, t):
        return self.net.value(x, t)

    def q(self, x, t):
        return q_values(self.net, self.discount, self.task, x, t)

    def policy(self, x, t):
        return np.argmax(self.q(x, t), axis=1)

    def __call__(self, x, t):
        return self.policy(x, t)
