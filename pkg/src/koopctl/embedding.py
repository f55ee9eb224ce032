"""Contrastive latent embedding of physical states.

A query encoder (on the gradient tape) and a key encoder (tape-detached,
tracked by EMA) map states through fully connected tanh layers into a
d-dimensional latent space; a learnable bilinear form scores query/key
similarity and an InfoNCE loss with in-batch negatives trains both.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import ndmath as nd

HIDDEN = 64
DEFAULT_LATENT_DIM = 50
DEFAULT_EMA_TAU = 0.95
DEFAULT_NOISE_SCALE = 0.1


class EncoderParams(NamedTuple):
    query: list          # [(W, b), ...] tensors, W stored (in, out)
    key: list            # same shapes, requires_grad=False
    similarity_W: nd.Tensor


class LatentBatch(NamedTuple):
    z_q: nd.Tensor
    z_plus: nd.Tensor


def init_layers(sizes, rng, trainable):
    layers = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_in, n_out))
        layers.append(
            (
                nd.Tensor(w, requires_grad=trainable),
                nd.Tensor(np.zeros(n_out), requires_grad=trainable),
            )
        )
    return layers


def init_encoder(state_dim, latent_dim, rng, hidden=HIDDEN):
    """Fresh query/key encoders (identical weights) plus the bilinear form.

    The similarity matrix starts at the identity so initial logits are plain
    dot products.
    """
    sizes = [state_dim, hidden, hidden, latent_dim]
    query = init_layers(sizes, rng, trainable=True)
    key = [
        (nd.Tensor(w.data.copy()), nd.Tensor(b.data.copy()))
        for w, b in query
    ]
    sim = nd.Tensor(np.eye(latent_dim), requires_grad=True)
    return EncoderParams(query=query, key=key, similarity_W=sim)


def encode(params, x, which="query"):
    """Forward pass, tanh between layers and a linear output layer.

    `which` selects the query encoder (gradients recorded) or the key
    encoder (never on the tape).
    """
    if which == "query":
        layers = params.query
    elif which == "key":
        layers = params.key
    else:
        raise nd.UsageError(f"unknown encoder {which!r}")
    x = x if isinstance(x, nd.Tensor) else nd.Tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] != layers[0][0].data.shape[0]:
        raise nd.DimensionError(
            f"encode expects (batch, {layers[0][0].data.shape[0]}), got {x.data.shape}"
        )
    if which == "key":
        with nd.no_grad():
            return _forward(layers, x)
    return _forward(layers, x)


def _forward(layers, h):
    for w, b in layers[:-1]:
        h = nd.tanh(nd.affine(h, w, b))
    w, b = layers[-1]
    return nd.affine(h, w, b)


def augment(x, scale, seed):
    """Elementwise uniform noise in [-scale*|x|, scale*|x|] added to x.

    `seed` may be an integer or an existing Generator (training passes its
    own stream). Zero entries are left untouched by construction.
    """
    if scale < 0:
        raise nd.UsageError("noise scale must be >= 0")
    rng = np.random.default_rng(seed)
    tensor_in = isinstance(x, nd.Tensor)
    data = x.data if tensor_in else np.asarray(x, dtype=np.float64)
    noisy = data + scale * np.abs(data) * rng.uniform(-1.0, 1.0, size=data.shape)
    return nd.Tensor(noisy) if tensor_in else noisy


def contrastive_loss(batch, similarity_W):
    """InfoNCE over in-batch negatives with a bilinear similarity.

    logits[i, j] = z_q[i] . W . z_plus[j]; the positive sits on the
    diagonal. Stabilised by max subtraction inside logsumexp.
    """
    z_q, z_plus = batch.z_q, batch.z_plus
    n = z_q.data.shape[0]
    if n < 2:
        raise nd.UsageError(f"contrastive loss needs batch >= 2, got {n}")
    logits = nd.matmul(nd.matmul(z_q, similarity_W), nd.transpose(z_plus))
    per_row = nd.sub(nd.logsumexp(logits, axis=1), nd.diag_part(logits))
    return nd.tmean(per_row)


def momentum_update(params, tau):
    """key <- tau * key + (1 - tau) * query, at the data level (no tape)."""
    if not 0.0 <= tau <= 1.0:
        raise nd.UsageError(f"EMA coefficient must be in [0, 1], got {tau}")
    if tau == 1.0:
        return
    for (qw, qb), (kw, kb) in zip(params.query, params.key):
        if tau == 0.0:
            kw.data = qw.data.copy()
            kb.data = qb.data.copy()
        else:
            kw.data = tau * kw.data + (1.0 - tau) * qw.data
            kb.data = tau * kb.data + (1.0 - tau) * qb.data


def encoder_tensors(params):
    """Named parameter map for checkpointing (queries, keys, similarity)."""
    out = {}
    for i, (w, b) in enumerate(params.query):
        out[f"encoder.query.{i}.w"] = w
        out[f"encoder.query.{i}.b"] = b
    for i, (w, b) in enumerate(params.key):
        out[f"encoder.key.{i}.w"] = w
        out[f"encoder.key.{i}.b"] = b
    out["encoder.similarity_w"] = params.similarity_W
    return out


def trainable_encoder_tensors(params):
    return [w for pair in params.query for w in pair]
