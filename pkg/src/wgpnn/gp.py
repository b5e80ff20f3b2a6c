"""Weighted Gaussian process over log-scaled time offsets.

Each candidate object owns a small GP whose training set is its pseudo-points
``(tau, y, w)``. The covariance between two inputs is

    k((tau, w), (tau', w')) = min(w, w') * exp(-gamma**2 * (tau - tau')**2)

so low-weight points only contribute weak evidence. The prior mean is zero.
All routines are batched over arbitrary leading dimensions, run in float64
and are differentiable through torch autograd.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from wgpnn.errors import NumericalError

DTYPE = torch.float64
MAX_JITTER = 1e-3


@dataclass(frozen=True)
class KernelParams:
    """Kernel hyperparameters. ``gamma`` may be a (learnable) scalar tensor."""

    gamma: float | torch.Tensor = 1.0
    query_weight: float = 1.0
    jitter: float = 1e-8

    def __post_init__(self):
        if not bool(torch.as_tensor(self.gamma) > 0):
            raise ValueError("gamma must be positive")
        if not 0 < self.query_weight <= 1:
            raise ValueError("query_weight must lie in (0, 1]")
        if not 0 <= self.jitter <= MAX_JITTER:
            raise ValueError(f"jitter must lie in [0, {MAX_JITTER}]")


@dataclass(frozen=True)
class RegularizerConfig:
    alpha: float = 1e-3
    beta: float = 1e-3
    nu: float = 1.0
    tau_max: float = 1.0
    quad_points: int = 16

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.nu < 0:
            raise ValueError("alpha, beta and nu must be non-negative")
        if self.tau_max <= 0:
            raise ValueError("tau_max must be positive")
        if self.quad_points < 2:
            raise ValueError("quad_points must be at least 2")


class Posterior(NamedTuple):
    mean: torch.Tensor
    var: torch.Tensor


class Scores(NamedTuple):
    mean: torch.Tensor
    var: torch.Tensor
    probs: torch.Tensor

    @property
    def scores(self):
        return self.mean


def _t(x):
    return torch.as_tensor(x, dtype=DTYPE)


def min_weight(w1, w2):
    """Elementwise minimum whose gradient goes to ``w1`` on ties."""
    return torch.where(w1 <= w2, w1, w2)


def weighted_kernel(tau1, w1, tau2, w2, params: KernelParams = KernelParams()):
    tau1, w1, tau2, w2 = map(_t, (tau1, w1, tau2, w2))
    gamma = _t(params.gamma)
    return min_weight(w1, w2) * torch.exp(-(gamma**2) * (tau1 - tau2) ** 2)


def gram_matrix(tau, w, params: KernelParams = KernelParams()):
    """Weighted kernel matrix of shape ``(..., N, N)``, without jitter."""
    tau, w = _t(tau), _t(w)
    return weighted_kernel(tau[..., :, None], w[..., :, None], tau[..., None, :], w[..., None, :], params)


def stable_cholesky(K, jitter=1e-8):
    """Cholesky factor of ``K + jitter * I``.

    Entries of a batch whose factorization fails get their jitter raised
    tenfold (starting from 1e-8 when ``jitter`` is zero) until it exceeds
    ``MAX_JITTER``, at which point :class:`NumericalError` is raised.
    """
    n = K.shape[-1]
    eye = torch.eye(n, dtype=K.dtype)
    jit = torch.full(K.shape[:-2], float(jitter), dtype=K.dtype)
    while True:
        L, info = torch.linalg.cholesky_ex(K + jit[..., None, None] * eye)
        bad = info != 0
        if not bool(bad.any()):
            return L
        jit = torch.where(bad, torch.clamp(jit * 10, min=1e-8), jit)
        if bool((jit[bad] > MAX_JITTER).any()):
            worst = K.detach()[bad][0]
            cond = torch.linalg.cond(worst).item()
            raise NumericalError(
                f"Gram matrix factorization failed with jitter up to {MAX_JITTER:g} "
                f"(condition number {cond:.3e})"
            )


def gp_posterior(tau, y, w, queries, params: KernelParams = KernelParams()) -> Posterior:
    """Posterior mean and variance at ``queries`` given pseudo-points.

    Shapes: ``tau, y, w`` are ``(..., N)``, ``queries`` is ``(..., Q)`` and
    both outputs are ``(..., Q)``. With ``N == 0`` the prior is returned.
    Variances are clamped to ``[0, query_weight]``.
    """
    tau, y, w, queries = map(_t, (tau, y, w, queries))
    qw = params.query_weight
    if tau.shape[-1] == 0:
        batch = torch.broadcast_shapes(tau.shape[:-1], queries.shape[:-1])
        shape = batch + queries.shape[-1:]
        return Posterior(torch.zeros(shape, dtype=DTYPE), torch.full(shape, qw, dtype=DTYPE))

    L = stable_cholesky(gram_matrix(tau, w, params), params.jitter)
    # cross-covariance (..., N, Q)
    k_star = weighted_kernel(
        tau[..., :, None], w[..., :, None], queries[..., None, :], _t(qw), params
    )
    alpha = torch.cholesky_solve(y[..., :, None], L)
    mean = (k_star * alpha).sum(-2)
    v = torch.linalg.solve_triangular(L, k_star, upper=False)
    var = torch.clamp(qw - (v**2).sum(-2), 0.0, qw)
    return Posterior(mean, var)


def softmax_cross_entropy(mean, target):
    """Deterministic ``-log softmax(mean)[target]``."""
    mean = _t(mean)
    target = torch.as_tensor(target)
    logz = torch.logsumexp(mean, -1)
    return logz - mean.gather(-1, target[..., None]).squeeze(-1)


def uce_loss_approx(mean, var, target, correction="taylor"):
    """Second-order closed form of ``E[-log softmax(z)[target]]``, ``z ~ N(mean, diag(var))``.

    The default expands the cross-entropy to second order around ``mean``.
    Its Hessian is ``diag(p) - p p^T`` with ``p = softmax(mean)``, so::

        loss = -mean[target] + logsumexp(mean) + 0.5 * sum_c var_c * p_c * (1 - p_c)

    ``correction="lognormal"`` instead expands ``E[log S]``, ``S = sum_c exp(z_c)``,
    around ``E[S]``::

        loss = -mean[target] + log E[S] - Var[S] / (2 E[S]**2)

    with ``E[exp z_c] = exp(mean_c + var_c / 2)`` and
    ``Var[exp z_c] = (exp(var_c) - 1) exp(2 mean_c + var_c)``. That form is
    badly biased when one logit dominates. ``correction="printed"`` swaps the
    variance factor for ``exp(var_c - 1)``; it exists only so tests can show
    it disagrees with Monte Carlo.
    """
    mean, var = _t(mean), _t(var)
    target = torch.as_tensor(target)
    true = mean.gather(-1, target[..., None]).squeeze(-1)
    if correction == "taylor":
        p = torch.softmax(mean, -1)
        return torch.logsumexp(mean, -1) - true + 0.5 * (var * p * (1 - p)).sum(-1)
    a = mean + 0.5 * var
    log_es = torch.logsumexp(a, -1)
    if correction == "lognormal":
        factor = torch.expm1(var)
    elif correction == "printed":
        factor = torch.exp(var - 1.0)
    else:
        raise ValueError(f"unknown correction {correction!r}")
    ratio = 0.5 * (factor * torch.exp(2.0 * (a - log_es[..., None]))).sum(-1)
    return log_es - true - ratio


def uce_loss_mc(mean, var, target, samples=1_000_000, seed=0, chunk=200_000):
    """Monte Carlo estimate of ``E[-log softmax(z)[target]]`` and its standard error.

    Plain numpy, independent of :func:`uce_loss_approx`.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.sqrt(np.asarray(var, dtype=np.float64))
    rng = np.random.default_rng(seed)
    # pooled mean / sum of squared deviations across chunks (Chan et al.)
    count, avg, m2 = 0, 0.0, 0.0
    while count < samples:
        n = min(chunk, samples - count)
        z = mean + std * rng.standard_normal((n, mean.size))
        zmax = z.max(axis=1, keepdims=True)
        logz = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
        loss = logz - z[:, target]
        c_avg = loss.mean()
        c_m2 = ((loss - c_avg) ** 2).sum()
        delta = c_avg - avg
        total = count + n
        avg += delta * n / total
        m2 += c_m2 + delta**2 * count * n / total
        count = total
    stderr = np.sqrt(m2 / count / count)
    return float(avg), float(stderr)


def quadrature_grid(cfg: RegularizerConfig):
    return torch.linspace(0.0, cfg.tau_max, cfg.quad_points, dtype=DTYPE)


def regularizer_from_posterior(posterior: Posterior, cfg: RegularizerConfig):
    """Trapezoid rule over a posterior evaluated on :func:`quadrature_grid`."""
    integrand = cfg.alpha * posterior.mean**2 + cfg.beta * (cfg.nu - posterior.var) ** 2
    return torch.trapezoid(integrand, quadrature_grid(cfg), dim=-1)


def regularizer(tau, y, w, params: KernelParams, cfg: RegularizerConfig):
    """Penalty pulling the posterior mean to 0 and variance to ``nu`` over ``[0, tau_max]``."""
    if cfg.alpha == 0 and cfg.beta == 0:
        return torch.zeros(_t(tau).shape[:-1], dtype=DTYPE)
    tau = _t(tau)
    grid = quadrature_grid(cfg).expand(tau.shape[:-1] + (cfg.quad_points,))
    return regularizer_from_posterior(gp_posterior(tau, y, w, grid, params), cfg)


def predict_scores(points, tau_star, params: KernelParams = KernelParams()) -> Scores:
    """Per-candidate posterior at ``tau_star`` plus a softmax over the means.

    ``points`` is either a ``(tau, y, w)`` tuple of ``(..., C, N)`` arrays or a
    list with one ``(tau, y, w)`` triple per candidate, where candidates may
    hold different numbers of points (including none).
    """
    if isinstance(points, list):
        means, vars_ = [], []
        for tau, y, w in points:
            post = gp_posterior(_t(tau), _t(y), _t(w), _t([float(tau_star)]), params)
            means.append(post.mean[0])
            vars_.append(post.var[0])
        mean, var = torch.stack(means), torch.stack(vars_)
    else:
        tau, y, w = map(_t, points)
        q = _t(tau_star)
        q = q.reshape(q.shape + (1, 1)).expand(tau.shape[:-1] + (1,))
        post = gp_posterior(tau, y, w, q, params)
        mean, var = post.mean[..., 0], post.var[..., 0]
    return Scores(mean, var, torch.softmax(mean, -1))
