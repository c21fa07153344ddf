"""Flat-parameter checkpoints prefixed with the network architecture.

Layout (little-endian)::

    magic (6 bytes, e.g. b"FLRL1\\n" or b"FLCK1\\n")
    u32 L                       number of layer sizes
    L * u32                     layer sizes
    (L-2) * u8                  hidden activation codes
    u8                          head code
    u64 P                       parameter count
    P * float64                 parameters in ParamVector layout
"""
from __future__ import annotations

import os
import struct

import numpy as np

from flsim import nn
from flsim.errors import FormatError

POLICY_MAGIC = b"FLRL1\n"
MODEL_MAGIC = b"FLCK1\n"

_ACTIVATIONS = list(nn.Activation)
_HEADS = list(nn.Head)


def params_to_bytes(spec: nn.MlpSpec, params: np.ndarray, magic: bytes) -> bytes:
    sizes = spec.layer_sizes
    parts = [
        magic,
        struct.pack("<I", len(sizes)),
        struct.pack(f"<{len(sizes)}I", *sizes),
        bytes(_ACTIVATIONS.index(a) for a in spec.activations),
        struct.pack("<B", _HEADS.index(spec.head)),
        struct.pack("<Q", spec.n_params),
        np.asarray(params, dtype="<f8").tobytes(),
    ]
    return b"".join(parts)


def params_from_bytes(blob: bytes, magic: bytes) -> tuple[nn.MlpSpec, np.ndarray]:
    if blob[:len(magic)] != magic:
        raise FormatError(f"bad magic: expected {magic!r}, found {blob[:len(magic)]!r}", offset=0)
    pos = len(magic)
    try:
        (n_sizes,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        sizes = struct.unpack_from(f"<{n_sizes}I", blob, pos)
        pos += 4 * n_sizes
        n_hidden = max(n_sizes - 2, 0)
        codes = blob[pos:pos + n_hidden]
        if len(codes) != n_hidden:
            raise FormatError("truncated activation codes", offset=pos)
        pos += n_hidden
        (head,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        (n_params,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
    except struct.error as exc:
        raise FormatError(f"truncated header: {exc}", offset=pos) from exc
    try:
        spec = nn.MlpSpec(sizes, [_ACTIVATIONS[c] for c in codes], _HEADS[head])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"invalid architecture header: {exc}", offset=len(magic)) from exc
    if spec.n_params != n_params:
        raise FormatError(f"header says {n_params} params, architecture needs {spec.n_params}",
                          offset=pos - 8)
    if len(blob) != pos + 8 * n_params:
        raise FormatError(f"expected {pos + 8 * n_params} bytes, got {len(blob)}", offset=len(blob))
    params = np.frombuffer(blob, dtype="<f8", count=n_params, offset=pos).astype(np.float64)
    return spec, params


def save_params(path: str | os.PathLike, spec: nn.MlpSpec, params: np.ndarray,
                magic: bytes = MODEL_MAGIC) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(spec, params, magic))


def load_params(path: str | os.PathLike, magic: bytes = MODEL_MAGIC):
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read(), magic)
