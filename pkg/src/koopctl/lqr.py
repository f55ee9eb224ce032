"""Differentiable infinite-horizon LQR over the latent space.

Cost matrices are diagonal with softplus-positive entries, the discrete
Riccati equation is unrolled a fixed number of iterations on the gradient
tape, and the resulting gain drives a tanh-squashed Gaussian policy whose
log-density is reparameterized (usable directly as an actor).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import ndmath as nd

TRAIN_DARE_ITERATIONS = 5
EVAL_DARE_ITERATIONS = 200
LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
_DIAG_FLOOR = 1e-6
# softplus(x) = 1  =>  x = ln(e - 1)
_RAW_FOR_UNIT = float(np.log(np.e - 1.0))
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class LqrParams:
    q_raw: nd.Tensor                 # (d,) unconstrained
    r_raw: nd.Tensor                 # (m,) unconstrained
    z_ref: nd.Tensor                 # (d,) reference latent
    iterations: int = TRAIN_DARE_ITERATIONS

    def __post_init__(self):
        if self.iterations < 1:
            raise nd.UsageError("DARE needs at least one iteration")


class LqrSolution(NamedTuple):
    P: nd.Tensor  # (d, d)
    G: nd.Tensor  # (m, d)


def init_params(latent_dim, control_dim, iterations=TRAIN_DARE_ITERATIONS):
    """Raw diagonals chosen so the effective Q and R start at the identity."""
    return LqrParams(
        q_raw=nd.Tensor(np.full(latent_dim, _RAW_FOR_UNIT), requires_grad=True),
        r_raw=nd.Tensor(np.full(control_dim, _RAW_FOR_UNIT), requires_grad=True),
        z_ref=nd.Tensor(np.zeros(latent_dim)),
        iterations=iterations,
    )


def effective_costs(params):
    """Q = diag(softplus(q_raw) + floor), same for R: SPD by construction."""
    q = nd.diag_embed(nd.add(nd.softplus(params.q_raw), _DIAG_FLOOR))
    r = nd.diag_embed(nd.add(nd.softplus(params.r_raw), _DIAG_FLOOR))
    return q, r


def solve_dare(model, params, iterations=None):
    """Unrolled Riccati recursion, fully on the tape.

    P <- A^T P A - A^T P B (R + B^T P B)^-1 B^T P A + Q, starting from
    P = Q, symmetrized every step; then G = (B^T P B + R)^-1 B^T P A.
    """
    m_iter = params.iterations if iterations is None else iterations
    q, r = effective_costs(params)
    a, b = model.A, model.B
    at, bt = nd.transpose(a), nd.transpose(b)
    p = q
    for i in range(m_iter):
        at_p = nd.matmul(at, p)
        bt_p = nd.matmul(bt, p)
        bt_p_a = nd.matmul(bt_p, a)
        inner = nd.add(nd.matmul(bt_p, b), r)
        try:
            k = nd.solve(inner, bt_p_a)
        except nd.NumericError as err:
            raise nd.NumericError(f"DARE iteration {i}: {err}") from err
        p_next = nd.add(
            nd.sub(nd.matmul(at_p, a), nd.matmul(nd.matmul(at_p, b), k)), q
        )
        p = nd.mul(nd.add(p_next, nd.transpose(p_next)), 0.5)
        if not np.all(np.isfinite(p.data)):
            raise nd.NumericError(f"DARE diverged at iteration {i}")
    bt_p = nd.matmul(bt, p)
    try:
        g = nd.solve(nd.add(nd.matmul(bt_p, b), r), nd.matmul(bt_p, a))
    except nd.NumericError as err:
        raise nd.NumericError(f"DARE gain solve: {err}") from err
    return LqrSolution(P=p, G=g)


def _as_batch(z):
    t = z if isinstance(z, nd.Tensor) else nd.Tensor(z)
    if t.data.ndim == 1:
        return nd.reshape(t, (1, t.data.shape[0])), True
    return t, False


def lqr_action_mean(sol, z, z_ref):
    """u* = -G (z - z_ref); accepts a single latent or a batch of rows."""
    zb, single = _as_batch(z)
    ref, _ = _as_batch(z_ref)
    if zb.data.shape[1] != sol.G.data.shape[1]:
        raise nd.DimensionError(
            f"latent dim {zb.data.shape[1]} does not match gain {sol.G.data.shape}"
        )
    u = nd.neg(nd.matmul(nd.sub(zb, ref), nd.transpose(sol.G)))
    return nd.reshape(u, (u.data.shape[1],)) if single else u


def policy_sample(sol, z, z_ref, log_std, seed):
    """Reparameterized tanh-squashed Gaussian around the LQR mean.

    Returns (u, log_prob): u = tanh(mu + exp(log_std) * eps) and the
    change-of-variables log-density
        sum_j [ -1/2 log 2pi - log_std_j - 1/2 eps_j^2 ]
        - sum_j log(1 - u_j^2 + 1e-6).
    Evaluated at the drawn sample this equals the usual N(a; mu, sigma)
    density term, and its gradients agree (the mean's direct and pathwise
    contributions cancel). `seed` is an integer or anything with a
    standard_normal method.
    """
    rng = seed if hasattr(seed, "standard_normal") else np.random.default_rng(seed)
    zb, single = _as_batch(z)
    mu = lqr_action_mean(sol, zb, z_ref)
    ls = nd.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    eps = rng.standard_normal(size=mu.data.shape)
    a = nd.add(mu, nd.mul(nd.exp(ls), nd.Tensor(eps)))
    u = nd.tanh(a)
    gauss = nd.sub(nd.neg(nd.add(ls, _HALF_LOG_2PI)), nd.Tensor(0.5 * eps * eps))
    corr = nd.log(nd.add(nd.sub(1.0, nd.square(u)), 1e-6))
    log_prob = nd.sub(nd.tsum(gauss, axis=1), nd.tsum(corr, axis=1))
    if single:
        return nd.reshape(u, (u.data.shape[1],)), nd.reshape(log_prob, (1,))
    return u, log_prob


def closed_loop_matrix(model, sol):
    """A - B G, whose eigenvalues are the closed-loop poles."""
    return nd.sub(model.A, nd.matmul(model.B, sol.G))


def lqr_tensors(params, log_std=None):
    out = {
        "lqr.q_raw": params.q_raw,
        "lqr.r_raw": params.r_raw,
        "lqr.z_ref": params.z_ref,
    }
    if log_std is not None:
        out["lqr.log_std"] = log_std
    return out
