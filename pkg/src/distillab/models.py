"""Small classifier architectures over the diffcore engine.

Three families are provided, all ReLU networks emitting raw logits
(softmax lives downstream in the objectives):

* ``mlp``          - fully connected stack for flat feature vectors.
* ``small-cnn``    - 3x3 convolution stack, global mean head.
* ``plain-resnet`` - constant-width residual blocks whose identity
  shortcuts can be switched off, leaving the same layer stack without
  skips.

There is no batch normalization; an optional per-channel affine scale
after each convolution stands in for it so the loss stays a pure
function of the parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterVector, Var
from .errors import ContractError

__all__ = [
    "ModelSpec",
    "Model",
    "param_count",
    "init",
    "forward",
    "forward_vars",
    "save_checkpoint",
    "load_checkpoint",
]

KINDS = ("mlp", "small-cnn", "plain-resnet")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor; parameter count is a pure function of it.

    ``input_dim`` is used by mlp, ``in_shape`` (C, H, W) by the two
    convolutional kinds. ``hidden`` lists mlp layer widths, ``channels``
    the per-conv output channels of small-cnn, and ``width``/``blocks``
    size the plain-resnet trunk.
    """

    kind: str
    k: int
    input_dim: int | None = None
    hidden: tuple[int, ...] = ()
    in_shape: tuple[int, int, int] | None = None
    channels: tuple[int, ...] = ()
    width: int = 8
    blocks: int = 2
    skip_connections: bool = True
    channel_affine: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown model kind {self.kind!r}")
        if self.k < 2:
            raise ContractError("k must be at least 2")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.in_shape is not None:
            object.__setattr__(self, "in_shape", tuple(int(d) for d in self.in_shape))
        if self.kind == "mlp":
            if not self.input_dim or self.input_dim < 1:
                raise ContractError("mlp requires a positive input_dim")
            if any(w < 1 for w in self.hidden):
                raise ContractError("mlp widths must be positive")
        else:
            if self.in_shape is None or len(self.in_shape) != 3:
                raise ContractError(f"{self.kind} requires in_shape=(C, H, W)")
            if any(d < 1 for d in self.in_shape):
                raise ContractError("in_shape dimensions must be positive")
        if self.kind == "small-cnn" and (not self.channels or any(c < 1 for c in self.channels)):
            raise ContractError("small-cnn requires positive channel counts")
        if self.kind == "plain-resnet" and (self.width < 1 or self.blocks < 1):
            raise ContractError("plain-resnet requires positive width and blocks")

    def segment_plan(self) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered (name, shape) pairs; weights lead with the filter axis."""
        plan = []
        if self.kind == "mlp":
            dims = (self.input_dim, *self.hidden, self.k)
            for i in range(len(dims) - 1):
                plan.append((f"layer{i}.weight", (dims[i + 1], dims[i])))
                plan.append((f"layer{i}.bias", (dims[i + 1],)))
            return plan
        c_in = self.in_shape[0]
        if self.kind == "small-cnn":
            for i, c_out in enumerate(self.channels):
                plan.append((f"conv{i}.weight", (c_out, c_in, 3, 3)))
                plan.append((f"conv{i}.bias", (c_out,)))
                if self.channel_affine:
                    plan.append((f"conv{i}.scale", (c_out,)))
                    plan.append((f"conv{i}.shift", (c_out,)))
                c_in = c_out
            plan.append(("head.weight", (self.k, c_in)))
            plan.append(("head.bias", (self.k,)))
            return plan
        w = self.width
        plan.append(("stem.weight", (w, c_in, 3, 3)))
        plan.append(("stem.bias", (w,)))
        if self.channel_affine:
            plan.append(("stem.scale", (w,)))
            plan.append(("stem.shift", (w,)))
        for b in range(self.blocks):
            for j in (1, 2):
                plan.append((f"block{b}.conv{j}.weight", (w, w, 3, 3)))
                plan.append((f"block{b}.conv{j}.bias", (w,)))
                if self.channel_affine:
                    plan.append((f"block{b}.conv{j}.scale", (w,)))
                    plan.append((f"block{b}.conv{j}.shift", (w,)))
        plan.append(("head.weight", (self.k, w)))
        plan.append(("head.bias", (self.k,)))
        return plan

    def to_json(self) -> dict:
        out = {
            "kind": self.kind,
            "k": self.k,
            "skip_connections": self.skip_connections,
            "channel_affine": self.channel_affine,
            "init_seed": self.init_seed,
        }
        if self.kind == "mlp":
            out["input_dim"] = self.input_dim
            out["hidden"] = list(self.hidden)
        else:
            out["in_shape"] = list(self.in_shape)
        if self.kind == "small-cnn":
            out["channels"] = list(self.channels)
        if self.kind == "plain-resnet":
            out["width"] = self.width
            out["blocks"] = self.blocks
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelSpec":
        kw = dict(obj)
        for key in ("hidden", "channels"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "in_shape" in kw:
            kw["in_shape"] = tuple(kw["in_shape"])
        return cls(**kw)


def param_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(s)) for _, s in spec.segment_plan())


@dataclass(frozen=True)
class Model:
    """A spec bound to concrete parameters. Immutable; swap via with_params."""

    spec: ModelSpec
    params: ParameterVector
    mode: str = "eval"

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ContractError(f"unknown mode {self.mode!r}")

    def with_params(self, params: ParameterVector) -> "Model":
        return replace(self, params=params)

    def with_mode(self, mode: str) -> "Model":
        return replace(self, mode=mode)

    def forward(self, x) -> np.ndarray:
        return forward(self, x)

    @property
    def k(self) -> int:
        return self.spec.k


def init(spec: ModelSpec, seed: int | None = None) -> Model:
    """Fresh model: fan-in-scaled normal weights, zero biases, unit scales."""
    rng = np.random.default_rng(spec.init_seed if seed is None else seed)
    items = []
    for name, shape in spec.segment_plan():
        base = name.rsplit(".", 1)[1]
        if base == "weight":
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif base == "scale":
            arr = np.ones(shape)
        else:  # bias, shift
            arr = np.zeros(shape)
        items.append((name, arr))
    return Model(spec=spec, params=ParameterVector.from_arrays(items))


# --------------------------------------------------------------------------
# forward passes

@lru_cache(maxsize=64)
def _im2col_indices(c, h, w, ksize, pad):
    hp, wp = h + 2 * pad, w + 2 * pad
    oh, ow = hp - ksize + 1, wp - ksize + 1
    ch = np.arange(c)[:, None, None, None, None] * (hp * wp)
    rows = (np.arange(oh)[:, None] + np.arange(ksize)[None, :])  # (oh, ksize)
    cols = (np.arange(ow)[:, None] + np.arange(ksize)[None, :])  # (ow, ksize)
    # index order (c, kh, kw, oh, ow) flattened
    idx = (
        ch
        + rows.T[None, :, None, :, None] * wp
        + cols.T[None, None, :, None, :]
    )
    return idx.reshape(-1), oh, ow


def _conv2d(x: Var, weight: Var, bias: Var, pad: int = 1) -> Var:
    n, c, h, w = x.shape
    f, _, kh, _ = weight.shape
    idx, oh, ow = _im2col_indices(c, h, w, kh, pad)
    xp = dc.pad2d(x, pad)
    cols = dc.take_cols(xp.reshape((n, -1)), idx)
    cols = cols.reshape((n, c * kh * kh, oh * ow)).transpose((0, 2, 1))
    flat = cols.reshape((n * oh * ow, c * kh * kh))
    out = dc.matmul(flat, weight.reshape((f, -1)).transpose()) + bias
    return out.reshape((n, oh, ow, f)).transpose((0, 3, 1, 2))


def _affine(x: Var, params, prefix: str) -> Var:
    scale = params[f"{prefix}.scale"].reshape((1, -1, 1, 1))
    shift = params[f"{prefix}.shift"].reshape((1, -1, 1, 1))
    return x * scale + shift


def _conv_unit(x: Var, params, prefix: str, spec: ModelSpec) -> Var:
    out = _conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])
    if spec.channel_affine:
        out = _affine(out, params, prefix)
    return out


def forward_vars(spec: ModelSpec, params: Mapping[str, Var], x: np.ndarray) -> Var:
    """Logits as a graph node; the single forward implementation."""
    xv = dc.constant(x)
    if spec.kind == "mlp":
        h = xv
        n_layers = len(spec.hidden) + 1
        for i in range(n_layers):
            h = dc.matmul(h, params[f"layer{i}.weight"].transpose()) + params[f"layer{i}.bias"]
            if i < n_layers - 1:
                h = h.relu()
        return h
    if spec.kind == "small-cnn":
        h = xv
        for i in range(len(spec.channels)):
            h = _conv_unit(h, params, f"conv{i}", spec).relu()
        pooled = h.reshape((h.shape[0], h.shape[1], -1)).mean(axis=2)
        return dc.matmul(pooled, params["head.weight"].transpose()) + params["head.bias"]
    h = _conv_unit(xv, params, "stem", spec).relu()
    for b in range(spec.blocks):
        inner = _conv_unit(h, params, f"block{b}.conv1", spec).relu()
        inner = _conv_unit(inner, params, f"block{b}.conv2", spec)
        h = (h + inner).relu() if spec.skip_connections else inner.relu()
    pooled = h.reshape((h.shape[0], h.shape[1], -1)).mean(axis=2)
    return dc.matmul(pooled, params["head.weight"].transpose()) + params["head.bias"]


def _check_input(spec: ModelSpec, x) -> np.ndarray:
    x = dc.as_array64(x, "input batch")
    if spec.kind == "mlp":
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != spec.input_dim:
            raise ContractError(
                f"expected inputs of shape (n, {spec.input_dim}), got {x.shape}"
            )
        return x
    if x.ndim == 3:
        x = x[None, ...]
    if x.ndim != 4 or x.shape[1:] != spec.in_shape:
        raise ContractError(f"expected inputs of shape (n, {spec.in_shape}), got {x.shape}")
    return x


def forward(model: Model, x) -> np.ndarray:
    """Logits for a batch; pure and deterministic in eval mode."""
    x = _check_input(model.spec, x)
    with dc.no_tape():
        leaves = {name: dc.constant(model.params.segment(name)) for name in model.params.names}
        return forward_vars(model.spec, leaves, x).data


# --------------------------------------------------------------------------
# checkpoint container
#
# Layout: magic, format version, u32 header length, JSON header
# (spec descriptor plus ordered segment table), then raw little-endian
# float64 payload. Writes are byte-deterministic.

_MAGIC = b"DLCK"
_VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    header = {
        "version": _VERSION,
        "spec": model.spec.to_json(),
        "mode": model.mode,
        "segments": [
            {"name": n, "shape": list(s)}
            for n, s in zip(model.params.names, model.params.shapes)
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = model.params.flat.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    spec = ModelSpec.from_json(header["spec"])
    names = [s["name"] for s in header["segments"]]
    shapes = [tuple(s["shape"]) for s in header["segments"]]
    flat = np.frombuffer(raw[12 + hlen :], dtype="<f8").astype(np.float64)
    params = ParameterVector(names, shapes, flat)
    expected = [(n, s) for n, s in zip(names, shapes)]
    if expected != spec.segment_plan():
        raise ContractError(f"{path}: segment table does not match the spec descriptor")
    return Model(spec=spec, params=params, mode=header.get("mode", "eval"))
