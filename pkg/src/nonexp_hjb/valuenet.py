"""Two-hidden-layer sigmoid networks with exact input derivatives.

The network ``N(z)`` maps ``z = (x, y)`` to ``out_dim`` outputs, where ``y =
1 - exp(-lam t)`` squashes time into ``[0, 1)``.  Besides the value we
propagate, in closed form, first derivatives with respect to every input and
second derivatives for a chosen set of state index pairs.  :meth:`MLP.backward`
then differentiates any linear combination of those quantities with respect
to the parameters, which is all an HJB-type residual at a fixed maximizing
action needs.

Parameters live in one flat vector so optimizers and checkpoints can treat
them uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def sigmoid_derivs(a):
    """Sigmoid and its first three derivatives."""
    s = 0.5 * (1.0 + np.tanh(0.5 * a))
    d1 = s * (1.0 - s)
    d2 = d1 * (1.0 - 2.0 * s)
    d3 = d1 * (1.0 - 6.0 * d1)
    return s, d1, d2, d3


def reparam_time(t, lam: float):
    t = np.asarray(t, dtype=float)
    if lam <= 0:
        raise ValueError("reparametrization rate must be > 0")
    if np.any(t < 0) or np.any(np.isnan(t)):
        raise ValueError("time must be nonnegative")
    y = -np.expm1(-lam * t)
    return float(y) if y.ndim == 0 else y


def inverse_reparam(y, lam: float):
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or np.any(y >= 1):
        raise ValueError("y must lie in [0, 1); y = 1 corresponds to t = inf")
    t = -np.log1p(-y) / lam
    return float(t) if t.ndim == 0 else t


class MLP:
    """``in_dim -> width -> width -> out_dim`` with sigmoid hidden units."""

    def __init__(self, in_dim: int, width: int, out_dim: int = 1, rng=None, params=None,
                 dtype=np.float64):
        self.in_dim, self.width, self.out_dim = int(in_dim), int(width), int(out_dim)
        # compute precision of forward/backward passes; parameters stay float64
        self.dtype = np.dtype(dtype)
        shapes = [(width, in_dim), (width,), (width, width), (width,), (out_dim, width), (out_dim,)]
        self.shapes = shapes
        sizes = [int(np.prod(s)) for s in shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        if params is not None:
            params = np.array(params, dtype=float)
            if params.shape != (self.offsets[-1],):
                raise ValueError(f"expected {self.offsets[-1]} parameters, got {params.shape}")
            self.params = params
        else:
            if rng is None:
                rng = np.random.default_rng()
            self.params = np.empty(self.offsets[-1])
            # uniform(+-1/sqrt(fan_in)) for weights and biases alike
            for i, s in enumerate(shapes):
                fan_in = s[1] if len(s) == 2 else shapes[i - 1][1]
                bound = 1.0 / np.sqrt(fan_in)
                self._view(i)[...] = rng.uniform(-bound, bound, size=s)

    def _view(self, i, vec=None):
        vec = self.params if vec is None else vec
        return vec[self.offsets[i]:self.offsets[i + 1]].reshape(self.shapes[i])

    @property
    def n_params(self) -> int:
        return int(self.offsets[-1])

    def layers(self):
        return [self._view(i).astype(self.dtype, copy=False) for i in range(6)]

    def copy(self) -> "MLP":
        return MLP(self.in_dim, self.width, self.out_dim, params=self.params.copy(),
                   dtype=self.dtype)

    def __call__(self, z):
        W1, b1, W2, b2, W3, b3 = self.layers()
        h1 = sigmoid_derivs(z @ W1.T + b1)[0]
        h2 = sigmoid_derivs(h1 @ W2.T + b2)[0]
        return h2 @ W3.T + b3

    def forward(self, z, first=(), pairs=()):
        """Value plus input derivatives.

        ``first`` lists input indices ``k`` for ``dN/dz_k``; ``pairs`` lists
        ``(k, l)`` for ``d2N/dz_k dz_l``.  Returns ``(out, cache)`` where
        ``out = (value (B, p), d1 (B, len(first), p), d2 (B, len(pairs), p))``.

        Tangents are stacked along a leading axis so each layer is a single
        matrix product: slot 0 holds the activations, then one slot per
        first-derivative index, then one per pair.
        """
        W1, b1, W2, b2, W3, b3 = self.layers()
        z = np.asarray(z, dtype=self.dtype)
        pairs = [tuple(p) for p in pairs]
        # every index used by a pair needs its first-order tangent
        idx = list(first) + sorted({k for pr in pairs for k in pr} - set(first))
        slot = {k: 1 + i for i, k in enumerate(idx)}
        F, P = len(idx), len(pairs)
        s1, p1, q1, r1 = sigmoid_derivs(z @ W1.T + b1)
        L1 = np.empty((1 + F + P,) + s1.shape, dtype=self.dtype)
        L1[0] = s1
        for k in idx:
            np.multiply(p1, W1[:, k], out=L1[slot[k]])
        for j, (k, l) in enumerate(pairs):
            np.multiply(q1, W1[:, k] * W1[:, l], out=L1[1 + F + j])
        A2 = L1 @ W2.T
        A2[0] += b2
        s2, p2, q2, r2 = sigmoid_derivs(A2[0])
        L2 = np.empty_like(L1)
        L2[0] = s2
        np.multiply(p2, A2[1:1 + F], out=L2[1:1 + F])
        for j, (k, l) in enumerate(pairs):
            L2[1 + F + j] = q2 * A2[slot[k]] * A2[slot[l]] + p2 * A2[1 + F + j]
        out = L2 @ W3.T
        out[0] += b3
        value = out[0]
        d1 = out[1:1 + len(first)].transpose(1, 0, 2)
        d2 = out[1 + F:].transpose(1, 0, 2)
        cache = dict(z=z, first=list(first), pairs=pairs, idx=idx, slot=slot,
                     p1=p1, q1=q1, r1=r1, p2=p2, q2=q2, r2=r2, L1=L1, A2=A2, L2=L2)
        return (value, d1, d2), cache

    def backward(self, cache, g_value, g_d1=None, g_d2=None) -> np.ndarray:
        """Parameter gradient of ``sum(g_value*value) + sum(g_d1*d1) + sum(g_d2*d2)``."""
        W1, b1, W2, b2, W3, b3 = self.layers()
        c = cache
        first, pairs, idx, slot = c["first"], c["pairs"], c["idx"], c["slot"]
        F, P = len(idx), len(pairs)
        L1, A2, L2 = c["L1"], c["A2"], c["L2"]
        p1, q1, r1, p2, q2, r2 = (c[k] for k in ("p1", "q1", "r1", "p2", "q2", "r2"))
        B, H = p1.shape
        grad = np.zeros(self.params.shape, dtype=self.dtype)
        gW1, gb1, gW2, gb2, gW3, gb3 = (self._view(i, grad) for i in range(6))

        G = np.zeros((1 + F + P, B, self.out_dim), dtype=self.dtype)
        G[0] = np.asarray(g_value).reshape(B, self.out_dim)
        if first:
            G[1:1 + len(first)] = np.asarray(g_d1).transpose(1, 0, 2)
        if P:
            G[1 + F:] = np.asarray(g_d2).transpose(1, 0, 2)
        gb3 += G[0].sum(0)
        gW3 += G.reshape(-1, self.out_dim).T @ L2.reshape(-1, H)
        BL2 = G @ W3

        # back through the second sigmoid layer and its tangents
        bA2 = np.empty_like(BL2)
        np.multiply(BL2[1:1 + F], p2, out=bA2[1:1 + F])
        bp2 = np.einsum("sbh,sbh->bh", BL2[1:1 + F], A2[1:1 + F])
        bq2 = np.zeros((B, H), dtype=self.dtype)
        for j, (k, l) in enumerate(pairs):
            g = BL2[1 + F + j]
            gq = g * q2
            bA2[slot[k]] += gq * A2[slot[l]]
            bA2[slot[l]] += gq * A2[slot[k]]
            bq2 += g * A2[slot[k]] * A2[slot[l]]
            bp2 += g * A2[1 + F + j]
            np.multiply(g, p2, out=bA2[1 + F + j])
        bA2[0] = BL2[0] * p2 + bp2 * q2 + bq2 * r2
        gW2 += bA2.reshape(-1, H).T @ L1.reshape(-1, H)
        gb2 += bA2[0].sum(0)
        BL1 = bA2 @ W2

        # back through the first sigmoid layer and its tangents
        bp1 = np.zeros((B, H), dtype=self.dtype)
        for k in idx:
            g = BL1[slot[k]]
            bp1 += g * W1[:, k]
            gW1[:, k] += np.einsum("bh,bh->h", g, p1)
        bq1 = np.zeros((B, H), dtype=self.dtype)
        for j, (k, l) in enumerate(pairs):
            g = BL1[1 + F + j]
            bq1 += g * (W1[:, k] * W1[:, l])
            w = np.einsum("bh,bh->h", g, q1)
            gW1[:, k] += w * W1[:, l]
            gW1[:, l] += w * W1[:, k]
        ba1 = BL1[0] * p1 + bp1 * q1 + bq1 * r1
        gW1 += ba1.T @ c["z"]
        gb1 += ba1.sum(0)
        return grad.astype(np.float64)


@dataclass
class DerivativeBundle:
    """Value and derivatives at a batch of ``(x, t)`` points.

    Shapes for a batch of ``B`` points, ``n`` state dimensions and ``p``
    outputs: ``value (B, p)``, ``grad_x (B, n, p)``, ``dV_dt (B, p)``,
    ``hess_xx (B, n, n, p)``.  Entries of ``hess_xx`` outside the requested
    pairs are zero.  ``squeeze()`` drops the output axis for scalar nets.
    """

    value: np.ndarray
    grad_x: np.ndarray
    dV_dt: np.ndarray
    hess_xx: np.ndarray
    cache: dict | None = None
    chain: np.ndarray | None = None

    def squeeze(self) -> "DerivativeBundle":
        return DerivativeBundle(self.value[..., 0], self.grad_x[..., 0], self.dV_dt[..., 0],
                                self.hess_xx[..., 0], self.cache, self.chain)


class ValueNet:
    """Approximator ``V(x, t) = N(x, y(t))`` with exact derivatives.

    ``out_dim > 1`` gives a vector-valued field, used for parameter
    sensitivities.
    """

    def __init__(self, state_dim: int, width: int = 64, out_dim: int = 1,
                 lam_reparam: float = 0.2, rng=None, params=None):
        if lam_reparam <= 0:
            raise ValueError("lam_reparam must be > 0")
        self.state_dim = int(state_dim)
        self.lam_reparam = float(lam_reparam)
        self.mlp = MLP(state_dim + 1, width, out_dim, rng=rng, params=params)

    @property
    def params(self) -> np.ndarray:
        return self.mlp.params

    @params.setter
    def params(self, value):
        value = np.asarray(value, dtype=float)
        if value.shape != self.mlp.params.shape:
            raise ValueError("parameter vector has the wrong shape")
        self.mlp.params = value.copy()

    @property
    def width(self) -> int:
        return self.mlp.width

    @property
    def out_dim(self) -> int:
        return self.mlp.out_dim

    def copy(self) -> "ValueNet":
        return ValueNet(self.state_dim, self.width, self.out_dim, self.lam_reparam,
                        params=self.params.copy())

    def _inputs(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.state_dim:
            raise ValueError(f"state must have {self.state_dim} components")
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:1])
        y = reparam_time(t, self.lam_reparam)
        return x, t, np.column_stack([x, y])

    def value(self, x, t) -> np.ndarray:
        """Network output, shape ``(B,)`` for scalar nets or ``(B, p)``."""
        _, _, z = self._inputs(x, t)
        out = self.mlp(z)
        return out[:, 0] if self.out_dim == 1 else out

    def eval_with_derivatives(self, x, t, pairs=None, keep_cache=False) -> DerivativeBundle:
        """Derivative bundle at a batch of points.

        ``pairs`` restricts the Hessian to the given ``(k, l)`` state index
        pairs (``k <= l``); ``None`` computes all of them.
        """
        x, t, z = self._inputs(x, t)
        n = self.state_dim
        if pairs is None:
            pairs = [(k, l) for k in range(n) for l in range(k, n)]
        first = list(range(n + 1))
        (v, d1, d2), cache = self.mlp.forward(z, first, pairs)
        chain = self.lam_reparam * np.exp(-self.lam_reparam * t)
        B, p = v.shape
        hess = np.zeros((B, n, n, p))
        for j, (k, l) in enumerate(pairs):
            hess[:, k, l] = d2[:, j]
            hess[:, l, k] = d2[:, j]
        return DerivativeBundle(v, d1[:, :n], d1[:, n] * chain[:, None], hess,
                                cache if keep_cache else None, chain)

    def backward(self, bundle: DerivativeBundle, g_value, g_grad_x=None, g_dV_dt=None,
                 g_hess=None) -> np.ndarray:
        """Parameter gradient of a linear functional of a cached bundle.

        Cotangents have the bundle's field shapes (the output axis may be
        omitted for scalar nets).
        """
        c = bundle.cache
        if c is None:
            raise ValueError("bundle was evaluated without keep_cache=True")
        B, n, p = len(c["z"]), self.state_dim, self.out_dim

        def shaped(g, shape):
            if g is None:
                return np.zeros(shape)
            return np.asarray(g, dtype=float).reshape(shape)

        gv = shaped(g_value, (B, p))
        gx = shaped(g_grad_x, (B, n, p))
        gt = shaped(g_dV_dt, (B, p))
        gh = shaped(g_hess, (B, n, n, p))
        g_d1 = np.concatenate([gx, (gt * bundle.chain[:, None])[:, None, :]], axis=1)
        g_d2 = np.stack([gh[:, k, l] + gh[:, l, k] if k != l else gh[:, k, k]
                         for k, l in c["pairs"]], axis=1) if c["pairs"] else None
        return self.mlp.backward(c, gv, g_d1, g_d2)


def check_finite_residuals(res: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(res).reshape(len(res), -1).all(axis=1))
    if bad.size:
        raise FloatingPointError(f"non-finite residual at sample index {int(bad[0])}")


def loss_param_gradient(net: ValueNet, bundle: DerivativeBundle, residuals, coeffs) -> tuple[float, np.ndarray]:
    """Mean squared residual and its parameter gradient.

    Each residual must be affine in the bundle fields with per-sample
    coefficients ``coeffs = (c_value, c_grad_x, c_dV_dt, c_hess)``, which is
    the case for HJB-type residuals at a fixed maximizing action.  Residuals
    of shape ``(B,)`` or ``(B, p)`` are supported.
    """
    residuals = np.asarray(residuals, dtype=float)
    check_finite_residuals(residuals)
    B = residuals.shape[0]
    with np.errstate(over="ignore"):
        loss = float(np.sum(residuals**2) / B)
    if not np.isfinite(loss):
        raise FloatingPointError("loss overflowed")
    w = 2.0 * residuals / B
    c_value, c_grad_x, c_dV_dt, c_hess = coeffs
    if residuals.ndim == 1:
        gv = w * c_value
        gx = w[:, None] * c_grad_x
        gt = w * c_dV_dt
        gh = w[:, None, None] * c_hess
    else:
        gv = w * c_value[..., None] if np.ndim(c_value) == 1 else w * c_value
        gx = w[:, None, :] * c_grad_x[..., None]
        gt = w * (c_dV_dt[..., None] if np.ndim(c_dV_dt) == 1 else c_dV_dt)
        gh = w[:, None, None, :] * c_hess[..., None]
    return loss, net.backward(bundle, gv, gx, gt, gh)


class Adam:
    """Adam on a flat parameter vector."""

    def __init__(self, n_params: int, lr: float = 0.003, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.step_count = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Update ``params`` in place and return it."""
        grad = np.asarray(grad, dtype=float)
        if grad.shape != params.shape:
            raise ValueError("gradient shape does not match parameters")
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient; parameters left untouched")
        k = self.step_count + 1
        with np.errstate(over="ignore", invalid="ignore"):
            m = self.beta1 * self.m + (1.0 - self.beta1) * grad
            v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
            update = self.lr * (m / (1.0 - self.beta1**k)) / (np.sqrt(v / (1.0 - self.beta2**k)) + self.eps)
        if not np.all(np.isfinite(update)):
            raise FloatingPointError("non-finite Adam update; parameters left untouched")
        self.m, self.v, self.step_count = m, v, k
        params -= update
        return params
