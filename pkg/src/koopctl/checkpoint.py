"""Bit-exact checkpoints: a text manifest plus one float64 blob.

`<base>.manifest` lists the format version, integer/text metadata, a config
snapshot, and one line per tensor (name, shape, element offset, count);
`<base>.blob` is the concatenation of all tensors as little-endian float64
in manifest order. Entries are written in sorted-name order, so
save -> load -> save is byte-identical. A CRC of the blob is stored in the
manifest and verified on load.
"""

from __future__ import annotations

import os
import zlib

import numpy as np

FORMAT_NAME = "koopctl-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or version-incompatible checkpoint."""


class LockError(CheckpointError):
    """Another live process holds the run-directory lock."""


def _atomic_write(path, data, mode):
    tmp = path + ".tmp"
    with open(tmp, mode) as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save(base_path, tensors, meta=None, config_lines=()):
    """Write `<base>.manifest` + `<base>.blob`.

    tensors: name -> ndarray (any shape, stored as float64).
    meta: name -> int or str scalars.
    """
    names = sorted(tensors)
    # note: ascontiguousarray would promote 0-d scalars to 1-d; asarray keeps them
    arrays = [np.asarray(tensors[n], dtype=np.float64, order="C") for n in names]

    blob = b"".join(a.astype("<f8", copy=False).tobytes() for a in arrays)
    crc = zlib.crc32(blob)

    lines = [f"{FORMAT_NAME} {FORMAT_VERSION}"]
    lines.append(f"blob_crc32 {crc}")
    for key in sorted(meta or {}):
        value = (meta or {})[key]
        text = str(value)
        if "\n" in text:
            raise CheckpointError(f"meta value for {key!r} must be single-line")
        lines.append(f"meta {key} {text}")
    for line in config_lines:
        lines.append(f"config {line}")
    offset = 0
    for name, arr in zip(names, arrays):
        parts = ["tensor", name, str(arr.ndim)]
        parts += [str(s) for s in arr.shape]
        parts += [str(offset), str(arr.size)]
        lines.append(" ".join(parts))
        offset += arr.size

    _atomic_write(base_path + ".blob", blob, "wb")
    _atomic_write(base_path + ".manifest", "\n".join(lines) + "\n", "w")


def load(base_path):
    """Read a checkpoint; returns (tensors, meta, config_lines)."""
    manifest_path = base_path + ".manifest"
    blob_path = base_path + ".blob"
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        with open(blob_path, "rb") as fh:
            blob = fh.read()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {base_path}: {err}") from err

    if not lines:
        raise CheckpointError("empty manifest")
    head = lines[0].split()
    if len(head) != 2 or head[0] != FORMAT_NAME:
        raise CheckpointError(f"not a {FORMAT_NAME} manifest: {lines[0]!r}")
    try:
        version = int(head[1])
    except ValueError as err:
        raise CheckpointError(f"bad version field {head[1]!r}") from err
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} unsupported (expected {FORMAT_VERSION})"
        )

    meta, config, specs = {}, [], []
    crc_expected = None
    for line in lines[1:]:
        if not line.strip():
            continue
        kind, _, rest = line.partition(" ")
        if kind == "blob_crc32":
            crc_expected = int(rest)
        elif kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "config":
            config.append(rest)
        elif kind == "tensor":
            parts = rest.split()
            try:
                name = parts[0]
                ndim = int(parts[1])
                dims = tuple(int(x) for x in parts[2:2 + ndim])
                offset = int(parts[2 + ndim])
                count = int(parts[3 + ndim])
            except (IndexError, ValueError) as err:
                raise CheckpointError(f"malformed tensor line: {line!r}") from err
            specs.append((name, dims, offset, count))
        else:
            raise CheckpointError(f"unknown manifest line: {line!r}")

    if crc_expected is None:
        raise CheckpointError("manifest missing blob checksum")
    if zlib.crc32(blob) != crc_expected:
        raise CheckpointError("blob checksum mismatch (corrupt checkpoint)")

    total = len(blob) // 8
    if len(blob) % 8 != 0:
        raise CheckpointError("blob length is not a multiple of 8")
    flat = np.frombuffer(blob, dtype="<f8")
    tensors = {}
    for name, dims, offset, count in specs:
        expected = 1
        for s in dims:
            expected *= s
        if expected != count or offset + count > total:
            raise CheckpointError(f"tensor {name!r} extent inconsistent with blob")
        tensors[name] = flat[offset:offset + count].reshape(dims).copy()
    return tensors, meta, config


def strip_tensors(base_path, out_path, drop_prefixes):
    """Copy a checkpoint, dropping tensors under the given name prefixes
    (used to shed the replay buffer from evaluation-only checkpoints)."""
    tensors, meta, config = load(base_path)
    kept = {
        n: a for n, a in tensors.items()
        if not any(n.startswith(p) for p in drop_prefixes)
    }
    meta = dict(meta)
    meta["stripped"] = ",".join(sorted(drop_prefixes))
    save(out_path, kept, meta, config)


class RunLock:
    """One writer per run directory, via a pid lock file."""

    def __init__(self, run_dir):
        self.path = os.path.join(run_dir, "run.lock")
        self._held = False

    def __enter__(self):
        if os.path.exists(self.path):
            try:
                with open(self.path, "r", encoding="utf-8") as fh:
                    pid = int(fh.read().strip())
            except (OSError, ValueError):
                pid = None
            if pid is not None and _process_alive(pid) and pid != os.getpid():
                raise LockError(
                    f"run directory is locked by live process {pid} ({self.path})"
                )
        with open(self.path, "w", encoding="utf-8") as fh:
            fh.write(str(os.getpid()))
        self._held = True
        return self

    def __exit__(self, *exc):
        if self._held:
            try:
                os.remove(self.path)
            except OSError:
                pass
            self._held = False
        return False


def _process_alive(pid):
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True
