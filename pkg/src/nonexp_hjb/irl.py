"""Recovering discount parameters from observed action switches.

At an observed switch from ``u-`` to ``u+`` both actions are equally good,
so ``F = (Q(x, u-, t) - Q(x, u+, t))**2`` vanishes under the true discount.
The gradient of ``F`` with respect to ``theta = (alpha0, beta0)`` needs the
value sensitivities ``dV/dtheta``, which solve a linear PDE obtained by
differentiating the HJB equation at the fixed maximizing action.  That PDE
is solved by the same collocation scheme with a second network.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .discount import DiscountModel
from .hjb import SolverConfig, TrainingDiverged, learning_rate, q_from_bundle, q_values, train
from .tasks import TaskModel
from .valuenet import Adam, ValueNet, loss_param_gradient

log = logging.getLogger(__name__)

#: Top-two Q values closer than this are treated as a tie in sensitivity training.
TIE_TOL = 1e-9


class SwitchDataError(ValueError):
    pass


@dataclass(frozen=True)
class SwitchDatum:
    """Observed switch from ``u_minus`` to ``u_plus`` at state ``x`` and time ``t``.

    Actions may be labels or indices; they are resolved against a task when used.
    """

    x: tuple
    u_minus: object
    u_plus: object
    t: float

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in np.atleast_1d(self.x)))
        object.__setattr__(self, "t", float(self.t))
        if self.u_minus == self.u_plus:
            raise SwitchDataError(f"switch needs two different actions, got {self.u_minus!r} twice")
        if not (self.t >= 0 and math.isfinite(self.t)):
            raise SwitchDataError(f"switch time must be finite and >= 0, got {self.t}")

    def to_dict(self) -> dict:
        return {"x": list(self.x), "u_minus": self.u_minus, "u_plus": self.u_plus, "t": self.t}


def _data_arrays(task: TaskModel, data):
    """Stack data into ``(x, t, i_minus, i_plus)`` arrays, validating against the task."""
    x = task.check_state(np.array([d.x for d in data], dtype=float).reshape(len(data), task.state_dim))
    t = np.array([d.t for d in data], dtype=float)
    im = np.array([task.action_index(d.u_minus) for d in data], dtype=int)
    ip = np.array([task.action_index(d.u_plus) for d in data], dtype=int)
    return x, t, im, ip


# -- objective ----------------------------------------------------------------

def switch_objective(net: ValueNet, discount: DiscountModel, task: TaskModel, data) -> np.ndarray:
    """Per-datum ``F``; accepts a single datum (returns a float) or a list."""
    single = isinstance(data, SwitchDatum)
    data = [data] if single else list(data)
    if not data:
        return np.zeros(0)
    x, t, im, ip = _data_arrays(task, data)
    q = q_values(net, discount, task, x, t)
    rows = np.arange(len(data))
    f = (q[rows, im] - q[rows, ip]) ** 2
    return float(f[0]) if single else f


# -- sensitivity PDE ----------------------------------------------------------

def _explicit_term(discount: DiscountModel, t, value):
    """``E_theta = -(d hazard / d theta) V``, shape ``(B, dim theta)``."""
    return -discount.hazard_theta_grad(t) * np.asarray(value)[:, None]


def sensitivity_residual(net: ValueNet, sens_net: ValueNet, discount: DiscountModel,
                         task: TaskModel, x, t, u_star=None) -> np.ndarray:
    """Residual ``H`` of the sensitivity PDE, shape ``(B, dim theta)``.

    ``u_star`` defaults to the maximizing action of the forward network.
    """
    _require_hyperbolic(discount)
    x = task.check_state(np.atleast_2d(x))
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:1])
    vb = net.eval_with_derivatives(x, t, pairs=task.hessian_pairs).squeeze()
    if u_star is None:
        u_star = np.argmax(q_from_bundle(vb, task, x), axis=1)
    sb = sens_net.eval_with_derivatives(x, t, pairs=task.hessian_pairs)
    h, _ = _sens_residual_from_bundles(vb.value, sb, discount, task, x, t, np.asarray(u_star))
    return h


def _sens_residual_from_bundles(value, sb, discount, task, x, t, u_star):
    hazard = np.asarray(discount.hazard(t), dtype=float) * np.ones(len(x))
    f = task.effective_drift_table(x)[np.arange(len(x)), u_star]
    half_d = 0.5 * task.diffusion[u_star]
    h = (_explicit_term(discount, t, value)
         - hazard[:, None] * sb.value
         + sb.dV_dt
         + np.einsum("bn,bnp->bp", f, sb.grad_x)
         + np.einsum("bkl,bklp->bp", half_d, sb.hess_xx))
    coeffs = (-hazard, f, np.ones(len(x)), half_d)
    return h, coeffs


def _require_hyperbolic(discount: DiscountModel):
    if not discount.is_hyperbolic:
        raise ValueError("discount sensitivities are defined for hyperbolic (alpha0, beta0) only")


def _collocation_batch(net, discount, task, n, lam, rng, boundary_fraction=0.0, max_tries=20):
    """Sample points, resampling those where the maximizer is ambiguous.

    A near-tie only matters when the tied actions have different dynamics;
    otherwise the residual does not depend on which one is picked.
    """
    x, t, _ = task.sample_states(n, lam, rng, boundary_fraction)
    for _ in range(max_tries):
        vb = net.eval_with_derivatives(x, t, pairs=task.hessian_pairs).squeeze()
        q = q_from_bundle(vb, task, x)
        order = np.argsort(-q, axis=1, kind="stable")
        rows = np.arange(n)
        first, second = order[:, 0], order[:, 1]
        gap = q[rows, first] - q[rows, second]
        eff = task.effective_drift_table(x)
        differ = (np.any(eff[rows, first] != eff[rows, second], axis=1)
                  | np.any(task.diffusion[first] != task.diffusion[second], axis=(1, 2)))
        bad = (gap < TIE_TOL) & differ
        if not bad.any():
            return x, t, vb.value, first
        xn, tn, _ = task.sample_states(int(bad.sum()), lam, rng)
        x, t = x.copy(), t.copy()
        x[bad], t[bad] = xn, tn
    raise FloatingPointError("could not draw a collocation batch free of action ties")


@dataclass
class SensitivityResult:
    net: ValueNet
    loss_history: np.ndarray
    config: SolverConfig


def train_sensitivity(net: ValueNet, discount: DiscountModel, task: TaskModel,
                      config: SolverConfig, callback=None, init: ValueNet | None = None) -> SensitivityResult:
    """Fit ``dV/dtheta`` with the forward network ``net`` held fixed.

    Uses the forward solver's sampling scheme, optimizer and learning-rate
    schedule; no shape annealing is applied.  Any annealing offset on
    ``discount`` is dropped, since the sensitivities belong to the target
    parameters.  ``init`` seeds the weights from an earlier sensitivity
    network (it is copied, not modified).
    """
    _require_hyperbolic(discount)
    discount = discount.with_offset(0.0)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    if init is not None:
        sens = init.copy()
    else:
        sens = ValueNet(task.state_dim, config.width, len(discount.theta), config.lam_reparam, rng=rng)
    opt = Adam(sens.mlp.n_params, lr=config.lr)
    losses = np.empty(config.episodes)
    eval_dtype = sens.mlp.dtype
    sens.mlp.dtype = np.dtype(config.precision)
    try:
        for k in range(config.episodes):
            x, t, value, u_star = _collocation_batch(net, discount, task, config.batch_size,
                                                     config.lam_reparam, rng,
                                                     config.boundary_fraction)
            sb = sens.eval_with_derivatives(x, t, pairs=task.hessian_pairs, keep_cache=True)
            h, coeffs = _sens_residual_from_bundles(value, sb, discount, task, x, t, u_star)
            last = sens.params.copy()
            opt.lr = learning_rate(config, k)
            try:
                loss, grad = loss_param_gradient(sens, sb, h, coeffs)
                opt.step(sens.params, grad)
            except FloatingPointError as exc:
                sens.params = last
                raise TrainingDiverged(f"sensitivity training diverged at episode {k}: {exc}",
                                       last_finite=sens, episode=k) from exc
            losses[k] = loss
            if config.log_every and k % config.log_every == 0:
                log.info("sensitivity episode %d loss %.3e", k, loss)
            if callback is not None:
                callback(k, loss, sens)
    finally:
        sens.mlp.dtype = eval_dtype
    return SensitivityResult(sens, losses, config)


# -- total gradient -----------------------------------------------------------

def switch_gradients(net: ValueNet, sens_net: ValueNet, discount: DiscountModel, task: TaskModel,
                     data, f_theta=None, f_value=None) -> np.ndarray:
    """Per-datum ``dF/dtheta``, shape ``(N, dim theta)``.

    ``f_theta(x, t)`` and ``f_value(x, t)`` are optional explicit partials of
    ``F`` (shapes ``(N, p)`` and ``(N,)``); both vanish for the plain
    switch objective and default to zero.  Variations of the switch state
    with ``theta`` are neglected.
    """
    _require_hyperbolic(discount)
    data = list(data)
    p = len(discount.theta)
    if not data:
        return np.zeros((0, p))
    x, t, im, ip = _data_arrays(task, data)
    rows = np.arange(len(data))
    vb = net.eval_with_derivatives(x, t, pairs=task.hessian_pairs).squeeze()
    q = q_from_bundle(vb, task, x)
    dq = q[rows, im] - q[rows, ip]
    sb = sens_net.eval_with_derivatives(x, t, pairs=task.hessian_pairs)
    eff = task.effective_drift_table(x)
    df = eff[rows, im] - eff[rows, ip]
    dd = task.diffusion[im] - task.diffusion[ip]
    d_dq = np.einsum("bn,bnp->bp", df, sb.grad_x) + 0.5 * np.einsum("bkl,bklp->bp", dd, sb.hess_xx)
    g = 2.0 * dq[:, None] * d_dq
    if f_theta is not None:
        g = g + np.asarray(f_theta(x, t), dtype=float)
    if f_value is not None:
        g = g + np.asarray(f_value(x, t), dtype=float)[:, None] * sb.value
    return g


def total_gradient(net, sens_net, discount, task, data, f_theta=None, f_value=None) -> np.ndarray:
    """``dF/dtheta`` summed over the data."""
    g = switch_gradients(net, sens_net, discount, task, data, f_theta, f_value)
    return g.sum(axis=0) if len(g) else np.zeros(len(discount.theta))


# -- grid scan ------------------------------------------------------------------

SCAN_COLUMNS = ("alpha0", "beta0", "F", "dF_dalpha0", "dF_dbeta0", "status")


def parse_grid(text: str) -> list[tuple[float, float]]:
    """``"a0=1:6:15,b0=0.25:3:15"`` -> product of two ``linspace`` axes.

    Each axis is ``start:stop:count``; a single number gives a one-point axis.
    """
    axes = {}
    for part in text.split(","):
        name, sep, spec = part.partition("=")
        name = name.strip()
        if not sep or name not in ("a0", "b0"):
            raise ValueError(f"bad grid axis {part!r}; expected a0=start:stop:count or b0=...")
        bits = spec.split(":")
        try:
            if len(bits) == 1:
                axes[name] = np.array([float(bits[0])])
            elif len(bits) == 3:
                n = int(bits[2])
                if n < 1:
                    raise ValueError
                axes[name] = np.linspace(float(bits[0]), float(bits[1]), n)
            else:
                raise ValueError
        except ValueError:
            raise ValueError(f"bad grid axis {part!r}; expected start:stop:count") from None
    if set(axes) != {"a0", "b0"}:
        raise ValueError("grid needs both a0 and b0 axes")
    return [(float(a), float(b)) for a, b in itertools.product(axes["a0"], axes["b0"])]


@dataclass
class ScanRow:
    alpha0: float
    beta0: float
    F: float = math.nan
    dF_dalpha0: float = math.nan
    dF_dbeta0: float = math.nan
    status: str = "ok"

    def as_tuple(self):
        return (self.alpha0, self.beta0, self.F, self.dF_dalpha0, self.dF_dbeta0, self.status)


def _solve_node(task, theta, data, config, sens_config, with_gradient, net0=None, sens0=None):
    a0, b0 = (float(v) for v in theta)
    row = ScanRow(a0, b0)
    d = DiscountModel.hyperbolic(a0, b0)
    net = train(d, task, config, net=None if net0 is None else net0.copy()).net
    row.F = float(np.mean(switch_objective(net, d, task, data))) if data else 0.0
    sens = None
    if with_gradient:
        sens = train_sensitivity(net, d, task, sens_config or config, init=sens0).net
        g = total_gradient(net, sens, d, task, data)
        row.dF_dalpha0, row.dF_dbeta0 = float(g[0]), float(g[1])
    return row, net, sens


def evaluate_node(task: TaskModel, theta, data, config: SolverConfig,
                  sens_config: SolverConfig | None = None, with_gradient: bool = True) -> ScanRow:
    """Forward solve, mean ``F`` and (optionally) summed ``dF/dtheta`` at one node."""
    return _solve_node(task, theta, data, config, sens_config, with_gradient)[0]


def serpentine_order(theta_grid) -> list[int]:
    """Visiting order that steps between neighbouring nodes of a product grid.

    Nodes are grouped by ``alpha0``; ``beta0`` runs up in one group and down
    in the next.
    """
    groups: dict[float, list[int]] = {}
    for i, (a0, _) in enumerate(theta_grid):
        groups.setdefault(float(a0), []).append(i)
    order = []
    for k, a0 in enumerate(sorted(groups)):
        idx = sorted(groups[a0], key=lambda i: theta_grid[i][1])
        order.extend(idx if k % 2 == 0 else idx[::-1])
    return order


def grid_scan(task: TaskModel, data, theta_grid, config: SolverConfig,
              sens_config: SolverConfig | None = None, with_gradient: bool = True,
              progress=None, warm_config: SolverConfig | None = None,
              init_net: ValueNet | None = None, init_sens: ValueNet | None = None,
              continuation: str = "chain") -> list[ScanRow]:
    """Evaluate every node of ``theta_grid``; failures are recorded, not raised.

    All nodes share ``config.seed`` so sampling noise is common across the grid.
    Rows with ``alpha0 <= 1`` are marked ``divergent`` without solving when the
    task's rewards are positive somewhere.

    Passing ``warm_config`` (or ``init_net``) replaces the cold solves by
    continuation runs trained with ``warm_config``:

    ``"chain"``
        Nodes are visited in :func:`serpentine_order` and each solve starts
        from the networks of the previously solved node.  The first node
        starts from ``init_net`` if given, otherwise from scratch with
        ``config``.
    ``"star"``
        Every node starts from ``init_net`` (required) and ``init_sens``.
        Since all nodes then share the starting point as well as the seed,
        the approximation error of the networks varies smoothly across the
        grid instead of changing from node to node.

    Sensitivity networks start from ``init_sens`` (or the previous node's in
    a chain) and are trained with ``sens_config`` if given, else with the
    forward settings of the node.  Rows come back in grid order either way.
    """
    from .hjb import DivergentObjective

    if continuation not in ("chain", "star"):
        raise ValueError(f"unknown continuation {continuation!r}")
    if continuation == "star" and init_net is None:
        raise ValueError("star continuation needs init_net")
    theta_grid = [(float(a), float(b)) for a, b in theta_grid]
    warm = warm_config is not None or init_net is not None
    chain = warm and continuation == "chain"
    order = serpentine_order(theta_grid) if chain else range(len(theta_grid))
    rows: list[ScanRow | None] = [None] * len(theta_grid)
    net, sens = init_net, init_sens
    for i, k in enumerate(order):
        a0, b0 = theta_grid[k]
        try:
            if warm:
                cfg = config if net is None else (warm_config or config)
                row, new_net, new_sens = _solve_node(task, (a0, b0), data, cfg, sens_config or cfg,
                                                     with_gradient, net, sens)
                if chain:
                    net, sens = new_net, new_sens if new_sens is not None else sens
            else:
                row = evaluate_node(task, (a0, b0), data, config, sens_config, with_gradient)
        except DivergentObjective:
            row = ScanRow(a0, b0, status="divergent")
        except (FloatingPointError, ValueError, RuntimeError) as exc:
            log.warning("scan node alpha0=%g beta0=%g failed: %s", a0, b0, exc)
            row = ScanRow(a0, b0, status=f"failed: {type(exc).__name__}")
        rows[k] = row
        if progress is not None:
            progress(i, row)
    return rows


def scan_argmin(rows) -> ScanRow | None:
    ok = [r for r in rows if r.status == "ok" and math.isfinite(r.F)]
    return min(ok, key=lambda r: r.F) if ok else None


# -- switch data files ----------------------------------------------------------

def _datum_from_obj(obj, where: str) -> SwitchDatum:
    if not isinstance(obj, dict):
        raise SwitchDataError(f"{where}: expected an object")
    missing = [k for k in ("x", "u_minus", "u_plus", "t") if k not in obj]
    if missing:
        raise SwitchDataError(f"{where}: missing field(s) {missing}")
    try:
        return SwitchDatum(obj["x"], obj["u_minus"], obj["u_plus"], obj["t"])
    except (TypeError, ValueError) as exc:
        raise SwitchDataError(f"{where}: {exc}") from None


def save_switch_data(path, data) -> None:
    """Write a JSON array with one datum per line."""
    lines = [json.dumps(d.to_dict()) for d in data]
    body = ",\n".join(lines)
    Path(path).write_text("[\n" + body + ("\n" if lines else "") + "]\n")


def load_switch_data(path, task: TaskModel | None = None) -> list[SwitchDatum]:
    """Read a switch-data JSON array.

    Errors name the offending line when the file has one datum per line (the
    layout written by :func:`save_switch_data`), and the array index otherwise.
    With ``task`` given, states and actions are validated against it.
    """
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SwitchDataError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, list):
        raise SwitchDataError(f"{path}: expected a JSON array of switch records")
    line_of = _record_lines(text, len(raw))
    data = []
    for i, obj in enumerate(raw):
        where = f"{path}: line {line_of[i]}" if line_of else f"{path}: record {i}"
        d = _datum_from_obj(obj, where)
        if task is not None:
            try:
                _data_arrays(task, [d])
            except ValueError as exc:
                raise SwitchDataError(f"{where}: {exc}") from None
        data.append(d)
    return data


def _record_lines(text: str, n: int):
    """1-based line numbers of records when each sits on its own line."""
    lines = [i + 1 for i, ln in enumerate(text.splitlines()) if ln.strip().startswith("{")]
    return lines if len(lines) == n else None
