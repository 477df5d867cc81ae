"""Self-contained executable artifacts: mini sequential networks and
elementwise preprocessing scripts, with batched execution.

Model blobs use the SSNN-v1 layout (little-endian):

    magic "SSNN" | version u16 = 1 | layer count u16 | layers...

    layer: kind u8 (1=Dense, 2=ReLU, 3=Tanh, 4=Affine)
      Dense:  in u32 | out u32 | weights f32 x (in*out), row-major [out][in] | bias f32 x out
      Affine: scale f32 | shift f32

Scripts are JSON documents; see docs/formats.md for the schema. Execution
is float32/float64 elementwise, step by step, with an optional final stack
of all inputs along a new trailing axis.

Dense layers accumulate in float32, summing the input index in a fixed
ascending order, so each output row depends only on its input row: that is
what makes request batching bitwise transparent.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ArityMismatch,
    BadMagic,
    BadScript,
    BadVersion,
    DimMismatch,
    DomainError,
    DTypeMismatch,
    ShapeMismatch,
    Truncated,
    WidthMismatch,
)

MODEL_MAGIC = b"SSNN"
MODEL_VERSION = 1

KIND_DENSE = 1
KIND_RELU = 2
KIND_TANH = 3
KIND_AFFINE = 4


@dataclass(frozen=True)
class Dense:
    in_width: int
    out_width: int
    weights: np.ndarray  # f32 [out, in]
    bias: np.ndarray  # f32 [out]

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32)
        b = np.ascontiguousarray(self.bias, dtype=np.float32)
        if w.shape != (self.out_width, self.in_width):
            raise DimMismatch(
                f"dense weights shape {w.shape} != ({self.out_width}, {self.in_width})"
            )
        if b.shape != (self.out_width,):
            raise DimMismatch(f"dense bias shape {b.shape} != ({self.out_width},)")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Tanh:
    pass


@dataclass(frozen=True)
class Affine:
    scale: float
    shift: float


Layer = Dense | ReLU | Tanh | Affine


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[Layer, ...]
    batch_size: int = 1
    device: str = "cpu"

    def __post_init__(self):
        if self.batch_size < 1:
            raise DimMismatch(f"batch_size must be >= 1, got {self.batch_size}")
        _validate_widths(self.layers)

    @property
    def input_width(self) -> int | None:
        """Width of the first dense layer; None when no dense layer constrains it."""
        for layer in self.layers:
            if isinstance(layer, Dense):
                return layer.in_width
        return None

    def with_binding(self, name: str, batch_size: int, device: str) -> "ModelSpec":
        return replace(self, name=name, batch_size=batch_size, device=device)


def _validate_widths(layers) -> None:
    width = None
    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            if width is not None and layer.in_width != width:
                raise DimMismatch(
                    f"layer {i}: dense expects input width {layer.in_width}, got {width}"
                )
            width = layer.out_width


def dump_model(m: ModelSpec) -> bytes:
    out = [MODEL_MAGIC, struct.pack("<HH", MODEL_VERSION, len(m.layers))]
    for layer in m.layers:
        if isinstance(layer, Dense):
            out.append(struct.pack("<BII", KIND_DENSE, layer.in_width, layer.out_width))
            out.append(layer.weights.tobytes())
            out.append(layer.bias.tobytes())
        elif isinstance(layer, ReLU):
            out.append(struct.pack("<B", KIND_RELU))
        elif isinstance(layer, Tanh):
            out.append(struct.pack("<B", KIND_TANH))
        elif isinstance(layer, Affine):
            out.append(struct.pack("<Bff", KIND_AFFINE, layer.scale, layer.shift))
        else:
            raise DimMismatch(f"unknown layer {layer!r}")
    return b"".join(out)


def load_model(blob: bytes) -> ModelSpec:
    """Parse and validate an SSNN-v1 blob.

    The blob carries only layers; name, batch size and device are bound when
    the model is stored (see ModelSpec.with_binding).
    """
    if len(blob) < 4 or blob[:4] != MODEL_MAGIC:
        raise BadMagic("model blob does not start with SSNN")
    if len(blob) < 8:
        raise Truncated("model header truncated")
    version, n_layers = struct.unpack_from("<HH", blob, 4)
    if version != MODEL_VERSION:
        raise BadVersion(f"model version {version}, expected {MODEL_VERSION}")
    off = 8
    layers: list[Layer] = []
    for i in range(n_layers):
        if len(blob) - off < 1:
            raise Truncated(f"layer {i} kind truncated")
        (kind,) = struct.unpack_from("<B", blob, off)
        off += 1
        if kind == KIND_DENSE:
            if len(blob) - off < 8:
                raise Truncated(f"layer {i} dense dims truncated")
            in_w, out_w = struct.unpack_from("<II", blob, off)
            off += 8
            if in_w < 1 or out_w < 1:
                raise DimMismatch(f"layer {i}: dense widths must be >= 1")
            nw, nb = in_w * out_w, out_w
            if len(blob) - off < 4 * (nw + nb):
                raise Truncated(f"layer {i} dense parameters truncated")
            w = np.frombuffer(blob, dtype="<f4", count=nw, offset=off).reshape(out_w, in_w)
            off += 4 * nw
            b = np.frombuffer(blob, dtype="<f4", count=nb, offset=off)
            off += 4 * nb
            layers.append(Dense(in_w, out_w, w.copy(), b.copy()))
        elif kind == KIND_RELU:
            layers.append(ReLU())
        elif kind == KIND_TANH:
            layers.append(Tanh())
        elif kind == KIND_AFFINE:
            if len(blob) - off < 8:
                raise Truncated(f"layer {i} affine parameters truncated")
            scale, shift = struct.unpack_from("<ff", blob, off)
            off += 8
            layers.append(Affine(scale, shift))
        else:
            raise BadMagic(f"layer {i}: unknown layer kind {kind}")
    if off != len(blob):
        raise Truncated(f"{len(blob) - off} trailing bytes after model")
    return ModelSpec(name="", layers=tuple(layers))


def _dense_forward(x: np.ndarray, layer: Dense) -> np.ndarray:
    # Accumulate over the input index in strict ascending order with plain
    # float32 elementwise ops (never BLAS): y[n,o] gathers x[n,i]*w[o,i]
    # one i at a time, bias last. Each output row is then a pure function
    # of its input row, independent of how many rows share the batch, and
    # the rounding sequence matches a scalar loop exactly.
    n = x.shape[0]
    acc = np.zeros((n, layer.out_width), dtype=np.float32)
    w = layer.weights
    for i in range(layer.in_width):
        acc += x[:, i : i + 1] * w[:, i]
    acc += layer.bias
    return acc


def run_model_exec(m: ModelSpec, batch: np.ndarray) -> np.ndarray:
    """Apply the layers to a [N, in] float32 batch; returns [N, out] float32."""
    x = np.asarray(batch)
    if x.dtype != np.float32:
        raise DTypeMismatch(f"model input must be float32, got {x.dtype}")
    if x.ndim != 2:
        raise WidthMismatch(f"model input must be 2-D, got {x.ndim}-D")
    width = m.input_width
    if width is not None and x.shape[1] != width:
        raise WidthMismatch(f"model {m.name!r} expects width {width}, got {x.shape[1]}")
    for layer in m.layers:
        if isinstance(layer, Dense):
            x = _dense_forward(x, layer)
        elif isinstance(layer, ReLU):
            x = np.maximum(x, np.float32(0.0))
        elif isinstance(layer, Tanh):
            x = np.tanh(x)
        else:
            x = x * np.float32(layer.scale) + np.float32(layer.shift)
    return np.ascontiguousarray(x, dtype=np.float32)


# --- elementwise op library ----------------------------------------------
#
# Shared by stored scripts and by the feature pipeline; every op maps an
# array to an array of the same shape and dtype.


def op_ln(x: np.ndarray) -> np.ndarray:
    if np.any(x <= 0):
        raise DomainError("ln of a non-positive value")
    return np.log(x)


def op_exp(x: np.ndarray) -> np.ndarray:
    return np.exp(x)


def op_fp(x: np.ndarray, c: float) -> np.ndarray:
    """Signed logarithm with offset: -ln|x|-c for x<0, 0 at x=0, ln(x)+c for x>0."""
    x = np.asarray(x)
    flat = np.atleast_1d(x).copy()
    out = np.zeros_like(flat)
    pos = flat > 0
    neg = flat < 0
    cc = flat.dtype.type(c)
    out[pos] = np.log(flat[pos]) + cc
    out[neg] = -np.log(-flat[neg]) - cc
    return out.reshape(x.shape)


def op_fp_inv(y: np.ndarray, c: float, epsilon: float = 1e-15) -> np.ndarray:
    """Inverse of op_fp over its image for |x| >= epsilon.

    The forward transform maps |x| >= epsilon to |y| >= c + ln(epsilon)
    (or to exactly 0), so anything nonzero inside that band cannot be a
    legitimate output and decoding it is a DomainError.
    """
    y = np.asarray(y)
    flat = np.atleast_1d(y).copy()
    threshold = c + np.log(epsilon)
    bad = (flat != 0) & (np.abs(flat) < threshold)
    if np.any(bad):
        raise DomainError(f"fp_inv undefined for 0 < |y| < {threshold} (c={c}, eps={epsilon})")
    out = np.zeros_like(flat)
    pos = flat > 0
    neg = flat < 0
    cc = flat.dtype.type(c)
    out[pos] = np.exp(flat[pos] - cc)
    out[neg] = -np.exp(-flat[neg] - cc)
    return out.reshape(y.shape)


def op_standardize(x: np.ndarray, mean: float, std: float) -> np.ndarray:
    if std == 0:
        raise DomainError("standardize with zero std")
    return (x - x.dtype.type(mean)) / x.dtype.type(std)


def op_affine(x: np.ndarray, a: float, b: float) -> np.ndarray:
    return x * x.dtype.type(a) + x.dtype.type(b)


def op_clamp(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.clip(x, x.dtype.type(lo), x.dtype.type(hi))


ALL = "all"


@dataclass(frozen=True)
class Step:
    target: int | str  # input index, or "all"
    op: str
    args: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ScriptSpec:
    name: str
    arity: int
    steps: tuple[Step, ...]
    finalize: str  # "stack" | "single"


_OP_ARGS = {
    "ln": (),
    "exp": (),
    "fp": ("c",),
    "fp_inv": ("c",),
    "standardize": ("mean", "std"),
    "affine": ("a", "b"),
    "clamp": ("lo", "hi"),
}

# args a step may carry beyond the required ones, with their defaults
_OP_OPTIONAL_ARGS = {"fp_inv": {"eps": 1e-15}}


def parse_script(blob: bytes) -> ScriptSpec:
    try:
        doc = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BadScript(f"script is not valid JSON: {e}") from None
    try:
        name = str(doc["name"])
        arity = int(doc["arity"])
        finalize = str(doc["finalize"])
        raw_steps = doc["steps"]
    except (KeyError, TypeError, ValueError) as e:
        raise BadScript(f"script document missing fields: {e}") from None
    if arity < 1:
        raise BadScript(f"arity must be >= 1, got {arity}")
    if finalize not in ("stack", "single"):
        raise BadScript(f"finalize must be 'stack' or 'single', got {finalize!r}")
    if finalize == "single" and arity != 1:
        raise BadScript("finalize 'single' requires arity 1")
    steps = []
    for i, s in enumerate(raw_steps):
        op = s.get("op")
        if op not in _OP_ARGS:
            raise BadScript(f"step {i}: unknown op {op!r}")
        target = s.get("target", ALL)
        if target != ALL:
            target = int(target)
            if not 0 <= target < arity:
                raise BadScript(f"step {i}: target {target} outside arity {arity}")
        args = {}
        for a in _OP_ARGS[op]:
            if a not in s:
                raise BadScript(f"step {i}: op {op!r} needs argument {a!r}")
            args[a] = float(s[a])
        for a in _OP_OPTIONAL_ARGS.get(op, {}):
            if a in s:
                args[a] = float(s[a])
        if op == "standardize" and args["std"] == 0:
            raise BadScript(f"step {i}: standardize std must be nonzero")
        if op == "clamp" and args["lo"] > args["hi"]:
            raise BadScript(f"step {i}: clamp lo > hi")
        steps.append(Step(target, op, args))
    return ScriptSpec(name, arity, tuple(steps), finalize)


def dump_script(s: ScriptSpec) -> bytes:
    doc = {
        "name": s.name,
        "arity": s.arity,
        "steps": [{"target": st.target, "op": st.op, **st.args} for st in s.steps],
        "finalize": s.finalize,
    }
    return json.dumps(doc, indent=1).encode("utf-8")


_OP_FUNCS = {
    "ln": lambda x, a: op_ln(x),
    "exp": lambda x, a: op_exp(x),
    "fp": lambda x, a: op_fp(x, a["c"]),
    "fp_inv": lambda x, a: op_fp_inv(x, a["c"], a.get("eps", 1e-15)),
    "standardize": lambda x, a: op_standardize(x, a["mean"], a["std"]),
    "affine": lambda x, a: op_affine(x, a["a"], a["b"]),
    "clamp": lambda x, a: op_clamp(x, a["lo"], a["hi"]),
}


def run_script_exec(s: ScriptSpec, inputs: list[np.ndarray]) -> np.ndarray:
    """Apply the steps to the inputs and finalize.

    All inputs must share shape and dtype (float32 or float64). "stack"
    stacks the transformed inputs along a new trailing axis; "single"
    passes the lone input through.
    """
    if len(inputs) != s.arity:
        raise ArityMismatch(f"script {s.name!r} takes {s.arity} inputs, got {len(inputs)}")
    arrays = [np.asarray(x) for x in inputs]
    shape = arrays[0].shape
    dtype = arrays[0].dtype
    if dtype not in (np.float32, np.float64):
        raise DTypeMismatch(f"script inputs must be float32/float64, got {dtype}")
    for i, a in enumerate(arrays[1:], start=1):
        if a.shape != shape:
            raise ShapeMismatch(f"input {i} shape {a.shape} != input 0 shape {shape}")
        if a.dtype != dtype:
            raise DTypeMismatch(f"input {i} dtype {a.dtype} != input 0 dtype {dtype}")
    arrays = [a.copy() for a in arrays]
    for st in s.steps:
        fn = _OP_FUNCS[st.op]
        if st.target == ALL:
            arrays = [fn(a, st.args) for a in arrays]
        else:
            arrays[st.target] = fn(arrays[st.target], st.args)
    if s.finalize == "single":
        return arrays[0]
    return np.stack(arrays, axis=-1)
