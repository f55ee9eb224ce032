"""Task-oriented Koopman control.

Learns a contrastive latent embedding, a linear latent model, and a
differentiable LQR policy end to end with soft actor-critic.
"""

import os

# Single-threaded BLAS: the matrices here are tiny (<= ~70x70) and thread
# fan-out costs more than it saves; it also keeps runs bit-stable across
# machines with different core counts.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

__version__ = "0.1.0"
