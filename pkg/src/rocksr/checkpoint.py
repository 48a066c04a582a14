"""Binary checkpoint format.

Layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"RSRCKPT\\n"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length H
    20      H     UTF-8 JSON header
    20+H    ...   raw array blobs, concatenated

The header holds ``spec`` (the resolved :class:`ModelSpec` fields),
``dtype``, ``arrays`` (a list of ``{"key", "dtype", "shape", "offset",
"nbytes"}`` with offsets relative to the start of the blob section) and a
free-form ``extra`` object. Array keys are prefixed by group:
``param/<name>``, ``bn_mean/<node>``, ``bn_var/<node>``, ``adam_m/<name>``,
``adam_v/<name>``. Blobs are stored as ``<f4`` or ``<f8``.

Writes go to a temporary file in the destination directory which is then
renamed over the target, so a crash never leaves a half-written checkpoint.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .models import ModelSpec, build_model
from .optim import AdamState

MAGIC = b"RSRCKPT\n"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint (bad magic) or an unparsable header."""


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    """Checkpoint contents disagree with the expected or embedded model spec."""


@dataclass
class Checkpoint:
    model: object
    optimizer: AdamState | None = None
    extra: dict = field(default_factory=dict)


def _collect_arrays(model, optimizer):
    arrays = {}
    for name, p in model.params.items():
        arrays[f"param/{name}"] = p.data
    for name, st in model.bn_states.items():
        arrays[f"bn_mean/{name}"] = st.running_mean
        arrays[f"bn_var/{name}"] = st.running_var
    if optimizer is not None:
        for name in optimizer.m:
            arrays[f"adam_m/{name}"] = optimizer.m[name]
            arrays[f"adam_v/{name}"] = optimizer.v[name]
    return arrays


def save_checkpoint(model, path, optimizer=None, extra=None):
    arrays = _collect_arrays(model, optimizer)
    table = []
    offset = 0
    blobs = []
    for key, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        table.append({"key": key, "dtype": le.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "spec": model.spec.to_dict(),
        "dtype": model.dtype.str,
        "bn_initialized": {n: st.initialized for n, st in model.bn_states.items()},
        "arrays": table,
        "metadata": model.metadata,
        "extra": extra or {},
    }
    if optimizer is not None:
        header["optimizer"] = {"beta1": optimizer.beta1, "beta2": optimizer.beta2,
                               "eps": optimizer.eps, "step": optimizer.step}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)))
            fh.write(hbytes)
            for raw in blobs:
                fh.write(raw)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_header(path):
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            if MAGIC.startswith(prefix[:8]) and prefix:
                raise TruncatedCheckpointError(f"{path}: file ends inside the fixed prefix")
            raise CheckpointFormatError(f"{path}: not a rocksr checkpoint")
        magic, version, hlen = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic bytes {magic!r}")
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
        hbytes = fh.read(hlen)
        if len(hbytes) < hlen:
            raise TruncatedCheckpointError(f"{path}: file ends inside the header")
        try:
            header = json.loads(hbytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from None
        data = fh.read()
    return header, data


def load_checkpoint(path, expected_spec=None):
    """Rebuild the model (and optimiser state, if stored) from ``path``.

    ``expected_spec`` guards against loading the wrong architecture.
    """
    header, data = read_header(path)
    spec = ModelSpec.from_dict(header["spec"])
    if expected_spec is not None and expected_spec.resolved() != spec:
        raise SpecMismatchError(
            f"{path}: checkpoint holds {spec}, expected {expected_spec.resolved()}")
    arrays = {}
    for entry in header["arrays"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(data):
            raise TruncatedCheckpointError(f"{path}: blob {entry['key']!r} is cut short")
        arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]),
                            count=int(np.prod(entry["shape"])), offset=entry["offset"])
        arrays[entry["key"]] = arr.reshape(entry["shape"])

    dtype = np.dtype(header["dtype"])
    model = build_model(spec, dtype=dtype)
    for name, p in model.params.items():
        key = f"param/{name}"
        if key not in arrays:
            raise SpecMismatchError(f"{path}: missing parameter {name!r}")
        if arrays[key].shape != p.data.shape:
            raise SpecMismatchError(
                f"{path}: parameter {name!r} has shape {arrays[key].shape}, "
                f"spec implies {p.data.shape}")
        p.data[...] = arrays[key]
    extra_params = {k for k in arrays if k.startswith("param/")} - {f"param/{n}" for n in model.params}
    if extra_params:
        raise SpecMismatchError(f"{path}: unexpected parameters {sorted(extra_params)}")
    for name, st in model.bn_states.items():
        st.running_mean[...] = arrays[f"bn_mean/{name}"]
        st.running_var[...] = arrays[f"bn_var/{name}"]
        st.initialized = bool(header["bn_initialized"].get(name, False))
    model.metadata = header.get("metadata", {})

    optimizer = None
    if "optimizer" in header:
        o = header["optimizer"]
        optimizer = AdamState(beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
        for key, arr in arrays.items():
            if key.startswith("adam_m/"):
                name = key[len("adam_m/"):]
                optimizer.m[name] = arr.astype(dtype, copy=True)
                optimizer.v[name] = arrays[f"adam_v/{name}"].astype(dtype, copy=True)
    return Checkpoint(model=model, optimizer=optimizer, extra=header.get("extra", {}))
