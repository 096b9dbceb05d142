"""The unsigned distance network and its checkpoint format."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import diffengine as de
from .errors import CheckpointFormatError

MAGIC = b"UDFKITCK"
FORMAT_VERSION = 1
_END = b"ENDCKPT\x00"

DTYPES = {"double": torch.float64, "single": torch.float32}


@dataclass(frozen=True)
class Architecture:
    width: int = 256
    depth: int = 8
    skip_at: Optional[int] = 4
    activation: str = "relu"
    softplus_beta: float = 100.0
    pe_freqs: int = 0

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.skip_at is not None and not (1 <= self.skip_at <= self.depth - 1):
            raise ValueError(f"skip_at must lie in [1, {self.depth - 1}]")
        if self.activation not in de.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return 3 + 6 * self.pe_freqs

    def layer_shapes(self):
        """``(in_features, out_features)`` for every affine layer, head last."""
        shapes = []
        for k in range(self.depth):
            fan_in = self.in_dim if k == 0 else self.width
            if k == self.skip_at:
                fan_in += self.in_dim
            fan_out = 1 if k == self.depth - 1 else self.width
            shapes.append((fan_in, fan_out))
        return shapes

    @property
    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())

    def to_dict(self) -> dict:
        return {
            "width": self.width, "depth": self.depth, "skip_at": self.skip_at,
            "activation": self.activation, "softplus_beta": self.softplus_beta,
            "pe_freqs": self.pe_freqs,
        }


def default_skip(depth: int) -> Optional[int]:
    return 4 if depth > 4 else None


class UdfField(nn.Module):
    """MLP ``R^3 -> R>=0``: hidden affine layers with a piecewise-linear
    activation, an optional re-injection of the input, and ``abs`` on the head."""

    def __init__(self, arch: Architecture, dtype=torch.float64):
        super().__init__()
        self.arch = arch
        self.layers = nn.ModuleList(
            nn.Linear(i, o, dtype=dtype) for i, o in arch.layer_shapes()
        )
        self._act = de.ACTIVATIONS[arch.activation]

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def param_names(self):
        return [n for n, _ in self.named_parameters()]

    def _encode(self, q):
        if self.arch.pe_freqs == 0:
            return q
        feats = [q]
        for k in range(self.arch.pe_freqs):
            w = (2.0 ** k) * math.pi
            feats += [torch.sin(w * q), torch.cos(w * q)]
        return torch.cat(feats, dim=-1)

    def signed(self, q):
        """Raw head output before the non-negativity transform."""
        x = self._encode(q)
        h = x
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            if k == self.arch.skip_at:
                h = torch.cat([h, x], dim=-1)
            h = de.affine(h, layer.weight, layer.bias)
            if k < last:
                if self.arch.activation == "softplus":
                    h = de.softplus(h, self.arch.softplus_beta)
                else:
                    h = self._act(h)
        return h.squeeze(-1)

    def forward(self, q):
        return de.absolute(self.signed(q))

    def get_flat(self) -> np.ndarray:
        return torch.nn.utils.parameters_to_vector(self.parameters()).detach().to(torch.float64).numpy().copy()

    def set_flat(self, vec):
        vec = torch.as_tensor(np.asarray(vec, dtype=np.float64)).to(self.dtype)
        if vec.numel() != self.param_count:
            raise ValueError(f"expected {self.param_count} parameters, got {vec.numel()}")
        with torch.no_grad():
            torch.nn.utils.vector_to_parameters(vec, self.parameters())


def init_field(seed: int, width: int = 256, depth: int = 8, skip_at="default",
               activation: str = "relu", pe_freqs: int = 0, precision: str = "double",
               softplus_beta: float = 100.0) -> UdfField:
    """Build a field with uniform fan-in initialisation ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

    Parameters are drawn in float64 from a private generator, so the same seed
    always gives the same values regardless of global torch RNG state.
    """
    if skip_at == "default":
        skip_at = default_skip(depth)
    arch = Architecture(width=width, depth=depth, skip_at=skip_at, activation=activation,
                        softplus_beta=softplus_beta, pe_freqs=pe_freqs)
    net = UdfField(arch, dtype=DTYPES[precision])
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for layer in net.layers:
            bound = 1.0 / math.sqrt(layer.in_features)
            w = (torch.rand(layer.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            b = (torch.rand(layer.bias.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            layer.weight.copy_(w)
            layer.bias.copy_(b)
    return net


def evaluate(field, points, batch: int = 65536) -> np.ndarray:
    """Distances at ``(M, 3)`` points as a float64 array (no graph recorded)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dtype = getattr(field, "dtype", torch.float64)
    out = np.empty(len(pts))
    with torch.no_grad():
        for s in range(0, len(pts), batch):
            q = torch.tensor(pts[s:s + batch], dtype=dtype)
            out[s:s + batch] = field(q).to(torch.float64).numpy()
    return out


def evaluate_with_gradient(field, points, batch: int = 32768):
    """Distances and input gradients at ``(M, 3)`` points, as float64 arrays."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dtype = getattr(field, "dtype", torch.float64)
    vals = np.empty(len(pts))
    grads = np.empty((len(pts), 3))
    for s in range(0, len(pts), batch):
        q = torch.tensor(pts[s:s + batch], dtype=dtype)
        v, g = de.value_and_input_gradient(field, q, create_graph=False)
        vals[s:s + batch] = v.detach().to(torch.float64).numpy()
        grads[s:s + batch] = g.detach().to(torch.float64).numpy()
    return vals, grads


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class FieldCheckpoint:
    architecture: Architecture
    params: np.ndarray
    center: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0
    metadata: dict = dc_field(default_factory=dict)
    precision: str = "double"

    def build(self) -> UdfField:
        net = UdfField(self.architecture, dtype=DTYPES[self.precision])
        net.set_flat(self.params)
        return net


def make_checkpoint(field: UdfField, center=None, scale: float = 1.0, metadata=None) -> FieldCheckpoint:
    precision = "single" if field.dtype == torch.float32 else "double"
    return FieldCheckpoint(
        architecture=field.arch,
        params=field.get_flat(),
        center=np.zeros(3) if center is None else np.asarray(center, dtype=np.float64).reshape(3),
        scale=float(scale),
        metadata=dict(metadata or {}),
        precision=precision,
    )


def _blob(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(path, ckpt: FieldCheckpoint):
    """Layout: magic, u32 version, descriptor JSON, u64 count + <f8 params,
    3x<f8 center + <f8 scale, metadata JSON, end marker (JSON blocks are u32 length-prefixed)."""
    desc = dict(ckpt.architecture.to_dict(), precision=ckpt.precision)
    params = np.ascontiguousarray(ckpt.params, dtype="<f8")
    if params.size != ckpt.architecture.param_count:
        raise CheckpointFormatError("parameter vector does not match the architecture")
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        _blob(desc),
        struct.pack("<Q", params.size),
        params.tobytes(),
        np.ascontiguousarray(ckpt.center, dtype="<f8").tobytes(),
        struct.pack("<d", ckpt.scale),
        _blob(ckpt.metadata),
        _END,
    ]
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def json(self):
        (n,) = struct.unpack("<I", self.take(4))
        try:
            return json.loads(self.take(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"corrupt JSON block: {exc}") from None


def load_checkpoint(path) -> FieldCheckpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("not a udfkit checkpoint (bad magic)")
    (version,) = struct.unpack("<I", r.take(4))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    desc = r.json()
    precision = desc.pop("precision", "double")
    try:
        arch = Architecture(**desc)
    except (TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"bad architecture descriptor: {exc}") from None
    (count,) = struct.unpack("<Q", r.take(8))
    if count != arch.param_count:
        raise CheckpointFormatError(
            f"parameter count {count} does not match descriptor ({arch.param_count})"
        )
    params = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
    center = np.frombuffer(r.take(24), dtype="<f8").astype(np.float64)
    (scale,) = struct.unpack("<d", r.take(8))
    metadata = r.json()
    if r.take(len(_END)) != _END:
        raise CheckpointFormatError("missing end marker")
    return FieldCheckpoint(arch, params, center, scale, metadata, precision)
