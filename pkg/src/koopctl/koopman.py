"""Linear latent dynamics z' = A z + B u.

Holds the learnable (A, B) pair, one-step prediction, the detached-target
model loss, and a closed-form ridge regression fitter used by the
two-stage baseline.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import ndmath as nd

DEFAULT_RIDGE = 1e-6


class KoopmanModel(NamedTuple):
    A: nd.Tensor  # (d, d)
    B: nd.Tensor  # (d, m)


def init_model(latent_dim, control_dim, rng):
    """Near-identity A keeps early Riccati recursions tame."""
    a = np.eye(latent_dim) + 0.01 * rng.standard_normal((latent_dim, latent_dim))
    b = 0.01 * rng.standard_normal((latent_dim, control_dim))
    return KoopmanModel(
        A=nd.Tensor(a, requires_grad=True),
        B=nd.Tensor(b, requires_grad=True),
    )


def predict(model, z, u):
    """One-step latent prediction, row convention: z @ A^T + u @ B^T."""
    z = z if isinstance(z, nd.Tensor) else nd.Tensor(z)
    u = u if isinstance(u, nd.Tensor) else nd.Tensor(u)
    return nd.add(
        nd.matmul(z, nd.transpose(model.A)),
        nd.matmul(u, nd.transpose(model.B)),
    )


def model_loss(model, z, u, z_next_hat):
    """Mean over the batch of ||z_next_hat - A z - B u||^2 per row.

    The target is expected tape-detached (the caller encodes x' and
    detaches); this loss shapes A and B only.
    """
    residual = nd.sub(z_next_hat, predict(model, z, u))
    return nd.tmean(nd.tsum(nd.square(residual), axis=1))


def fit_least_squares(z, u, z_next, ridge=DEFAULT_RIDGE):
    """Closed-form [A B] from stacked regressors via the normal equations.

    Minimises sum ||z' - A z - B u||^2 + ridge * ||[A B]||_F^2. Pure numpy
    (nothing here needs the tape); returns a frozen model.
    """
    z = z.data if isinstance(z, nd.Tensor) else np.asarray(z, dtype=np.float64)
    u = u.data if isinstance(u, nd.Tensor) else np.asarray(u, dtype=np.float64)
    z_next = z_next.data if isinstance(z_next, nd.Tensor) else np.asarray(z_next, dtype=np.float64)
    n, d = z.shape
    m = u.shape[1]
    if n < d + m:
        raise nd.UsageError(f"need at least d+m={d + m} samples, got {n}")
    phi = np.hstack([z, u])                      # (n, d+m)
    gram = phi.T @ phi + ridge * np.eye(d + m)
    if ridge == 0.0:
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > 1e12:
            raise nd.NumericError(
                f"rank-deficient regressor with ridge=0, cond ~ {cond:.3e}"
            )
    theta = np.linalg.solve(gram, phi.T @ z_next)  # (d+m, d)
    return KoopmanModel(A=nd.Tensor(theta[:d].T), B=nd.Tensor(theta[d:].T))


def model_tensors(model):
    return {"koopman.a": model.A, "koopman.b": model.B}
