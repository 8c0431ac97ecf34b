"""Model checkpoints: ``key=value`` text header, ``END`` line, then little-endian f64 parameters.

Example header::

    SOMNOCKPT1
    model=stage
    hidden=16
    params=w1:16x6,b1:16,w2:3x16,b2:3
    seed=0
    END
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .experience_model import N_INPUTS, ExperienceNet
from .stage_model import N_CLASSES, N_FEATURES, StageNet

MAGIC = "SOMNOCKPT1"


class CheckpointError(ValueError):
    pass


def _shape_text(arr):
    return "x".join(str(d) for d in arr.shape)


def save(net, path, **meta) -> Path:
    if isinstance(net, StageNet):
        header = {"model": "stage", "hidden": str(net.hidden)}
    elif isinstance(net, ExperienceNet):
        header = {"model": "experience"}
    else:
        raise TypeError(f"cannot checkpoint {type(net).__name__}")
    params = net.params()
    header["params"] = ",".join(f"{k}:{_shape_text(v)}" for k, v in params.items())
    for key, value in sorted(meta.items()):
        text = str(value)
        if "\n" in text or "=" in key:
            raise CheckpointError(f"metadata {key!r} cannot be written to a text header")
        header[key] = text
    lines = [MAGIC] + [f"{k}={v}" for k, v in header.items()] + ["END"]
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values())
    path = Path(path)
    path.write_bytes(("\n".join(lines) + "\n").encode() + payload)
    return path


def _expected_shapes(header):
    kind = header.get("model")
    if kind == "stage":
        try:
            h = int(header["hidden"])
        except (KeyError, ValueError):
            raise CheckpointError("stage checkpoint lacks a valid 'hidden' entry") from None
        return StageNet, {"w1": (h, N_FEATURES), "b1": (h,), "w2": (N_CLASSES, h), "b2": (N_CLASSES,)}
    if kind == "experience":
        return ExperienceNet, {"w": (2, N_INPUTS), "b": (2,)}
    raise CheckpointError(f"unknown model kind {kind!r}")


def load(path, expect: str | None = None):
    """Load a checkpoint. Returns ``(net, header)``; shapes are validated."""
    data = Path(path).read_bytes()
    marker = b"\nEND\n"
    cut = data.find(marker)
    if not data.startswith(MAGIC.encode() + b"\n") or cut < 0:
        raise CheckpointError(f"{path}: not a {MAGIC} checkpoint")
    header = {}
    for line in data[:cut].decode().splitlines()[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"{path}: malformed header line {line!r}")
        header[key] = value
    if expect is not None and header.get("model") != expect:
        raise CheckpointError(f"{path}: expected a {expect} checkpoint, found {header.get('model')!r}")
    cls, shapes = _expected_shapes(header)
    declared = {}
    for item in header.get("params", "").split(","):
        name, _, dims = item.partition(":")
        try:
            declared[name] = tuple(int(d) for d in dims.split("x"))
        except ValueError:
            raise CheckpointError(f"{path}: bad params entry {item!r}") from None
    if declared != shapes:
        raise CheckpointError(f"{path}: parameter shapes {declared} do not match architecture {shapes}")
    payload = data[cut + len(marker):]
    sizes = [int(np.prod(s)) for s in shapes.values()]
    if len(payload) != 8 * sum(sizes):
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, expected {8 * sum(sizes)}")
    flat = np.frombuffer(payload, dtype="<f8")
    params, offset = {}, 0
    for (name, shape), size in zip(shapes.items(), sizes):
        params[name] = flat[offset:offset + size].reshape(shape).copy()
        offset += size
    try:
        net = cls.from_params(params)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return net, header
