"""Named random streams derived from a single run seed.

Every stochastic consumer (weight init, env resets, policy noise, buffer
sampling, augmentation, ...) gets its own PCG64 generator keyed by a stable
stream name, so adding draws to one consumer never shifts another's
sequence. Stream state round-trips through float64 buffers for the
checkpoint format.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAM_NAMES = ("init", "env", "actor", "buffer", "augment", "perturb")


def stream(seed, name):
    """Independent generator for (seed, name); deterministic everywhere."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, tag])))


class RunStreams:
    """The fixed set of generators a training run owns."""

    def __init__(self, seed):
        self.seed = seed
        for name in STREAM_NAMES:
            setattr(self, name, stream(seed, name))

    def state_array(self, name):
        """Pack one stream's PCG64 state into a float64 vector (lossless)."""
        st = getattr(self, name).bit_generator.state
        words = []
        for key in ("state", "inc"):
            v = st["state"][key]
            for _ in range(4):  # 128-bit integer -> 4 x uint32
                words.append(v & 0xFFFFFFFF)
                v >>= 32
        words.append(st["has_uint32"])
        words.append(st["uinteger"])
        return np.array(words, dtype=np.float64)

    def load_state_array(self, name, arr):
        arr = np.asarray(arr)
        if arr.shape != (10,):
            raise ValueError(f"stream state for {name!r} must have 10 entries")
        words = [int(w) for w in arr]
        vals = {}
        for slot, chunk in (("state", words[0:4]), ("inc", words[4:8])):
            v = 0
            for i, w in enumerate(chunk):
                v |= w << (32 * i)
            vals[slot] = v
        getattr(self, name).bit_generator.state = {
            "bit_generator": "PCG64",
            "state": vals,
            "has_uint32": words[8],
            "uinteger": words[9],
        }
