"""Small declarative models: MLPs and tiny CNNs on top of :mod:`peerlab.tensor`.

A :class:`ModelSpec` is a static layer list plus the input shape; a
:class:`Params` holds the learnable tensors keyed by stable names such as
``"layer0.weight"``. :class:`Model` binds the two for convenience.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ParameterError, ShapeError, Tensor


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv:
    """3x3 / stride 1 / pad 1 convolution; input channels come from the preceding shape."""

    channels: int


@dataclass(frozen=True)
class Pool:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


ROLES = ("student", "peer", "teacher", "surrogate")


class SpecError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    layers: tuple
    class_count: int
    role: str = "student"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.role not in ROLES:
            raise SpecError(f"unknown role {self.role!r}")
        if self.class_count < 1:
            raise SpecError("class_count must be positive")
        out = self.shapes()[-1]
        if out != (self.class_count,):
            raise SpecError(f"final layer emits {out}, expected ({self.class_count},)")

    def shapes(self) -> list:
        """Per-sample shape after each layer, starting with the input shape."""
        shape = self.input_shape
        shapes = [shape]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if shape != (layer.in_features,):
                    raise SpecError(f"layer {i}: dense expects ({layer.in_features},), got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Conv):
                if len(shape) != 3:
                    raise SpecError(f"layer {i}: conv needs (C, H, W) input, got {shape}")
                shape = (layer.channels,) + shape[1:]
            elif isinstance(layer, Pool):
                if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                    raise SpecError(f"layer {i}: pool needs (C, H>=2, W>=2) input, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, ReLU):
                pass
            else:
                raise SpecError(f"layer {i}: unknown descriptor {layer!r}")
            shapes.append(shape)
        return shapes

    def with_role(self, role: str) -> "ModelSpec":
        return ModelSpec(self.input_shape, self.layers, self.class_count, role)


def mlp(in_features: int, hidden: list, classes: int, role: str = "student") -> ModelSpec:
    layers = []
    prev = in_features
    for h in hidden:
        layers += [Dense(prev, h), ReLU()]
        prev = h
    layers.append(Dense(prev, classes))
    return ModelSpec((in_features,), layers, classes, role)


def cnn(input_shape: tuple, channels: list, classes: int, role: str = "student") -> ModelSpec:
    c, h, w = input_shape
    layers = []
    for ch in channels:
        layers += [Conv(ch), ReLU(), Pool()]
        h, w = h // 2, w // 2
    layers += [Flatten(), Dense(channels[-1] * h * w, classes)]
    return ModelSpec(tuple(input_shape), layers, classes, role)


PRESETS = ("mlp-s", "mlp-p", "cnn-t")


def preset(name: str, input_shape, classes: int, role: str = "student") -> ModelSpec:
    """Build one of the shipped desk-scale architectures.

    ``mlp-s`` is in-16-16-classes, ``mlp-p`` is in-32-32-classes and
    ``cnn-t`` is conv8-pool-conv16-pool-dense for (C, H, W) images.
    """
    if isinstance(input_shape, int):
        input_shape = (input_shape,)
    input_shape = tuple(input_shape)
    if name in ("mlp-s", "mlp-p"):
        width = 16 if name == "mlp-s" else 32
        return mlp(int(np.prod(input_shape)), [width, width], classes, role)
    if name == "cnn-t":
        if len(input_shape) != 3:
            raise SpecError("cnn-t needs a (C, H, W) input shape")
        return cnn(input_shape, [8, 16], classes, role)
    raise SpecError(f"unknown preset {name!r}; choose from {PRESETS}")


@dataclass
class Params:
    tensors: "OrderedDict[str, Tensor]"
    seed: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def names(self) -> list:
        return list(self.tensors)

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self.tensors.items())

    def copy(self, requires_grad: bool = True) -> "Params":
        return Params(OrderedDict((k, Tensor(t.data.copy(), requires_grad=requires_grad, name=k))
                                  for k, t in self.tensors.items()), self.seed)

    def frozen(self) -> "Params":
        """Zero-copy view whose tensors never receive gradients."""
        return Params(OrderedDict((k, Tensor(t.data, name=k)) for k, t in self.tensors.items()), self.seed)

    @classmethod
    def from_arrays(cls, arrays: dict, seed: int = 0, requires_grad: bool = True) -> "Params":
        return cls(OrderedDict((k, Tensor(np.array(v), requires_grad=requires_grad, name=k))
                               for k, v in arrays.items()), seed)


def _param_shapes(spec: ModelSpec) -> "OrderedDict[str, tuple]":
    shapes = spec.shapes()
    out = OrderedDict()
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            out[f"layer{i}.weight"] = (layer.in_features, layer.out_features)
            out[f"layer{i}.bias"] = (layer.out_features,)
        elif isinstance(layer, Conv):
            out[f"layer{i}.weight"] = (layer.channels, shapes[i][0], 3, 3)
            out[f"layer{i}.bias"] = (layer.channels,)
    return out


def init_params(spec: ModelSpec, seed: int) -> Params:
    """Uniform(+-sqrt(6 / fan_in)) weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in _param_shapes(spec).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else shape[1] * 9
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return Params(tensors, seed)


def check_params(spec: ModelSpec, params: Params) -> None:
    expected = _param_shapes(spec)
    if list(expected) != params.names():
        raise SpecError(f"parameter names {params.names()} do not match spec {list(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(name, params[name].shape, shape)


def _run(spec: ModelSpec, params: Params, x, stop_before_last_dense: bool = False) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[1:] != spec.input_shape:
        raise ShapeError("forward", x.shape, (None,) + spec.input_shape)
    last_dense = max(i for i, l in enumerate(spec.layers) if isinstance(l, Dense))
    h = x
    for i, layer in enumerate(spec.layers):
        if stop_before_last_dense and i == last_dense:
            return h
        if isinstance(layer, Dense):
            h = T.add_bias(T.matmul(h, params[f"layer{i}.weight"]), params[f"layer{i}.bias"])
        elif isinstance(layer, Conv):
            h = T.add_bias(T.conv2d(h, params[f"layer{i}.weight"]), params[f"layer{i}.bias"])
        elif isinstance(layer, ReLU):
            h = T.relu(h)
        elif isinstance(layer, Pool):
            h = T.max_pool2d(h)
        elif isinstance(layer, Flatten):
            h = T.flatten(h)
    return h


def forward_logits(spec: ModelSpec, params: Params, x) -> Tensor:
    """Batch logits of shape (N, class_count)."""
    return _run(spec, params, x)


def penultimate(spec: ModelSpec, params: Params, x) -> Tensor:
    """Activations feeding the final dense layer."""
    if len(spec.layers) < 2:
        raise SpecError("penultimate features need a spec with at least two layers")
    return _run(spec, params, x, stop_before_last_dense=True)


def predict_prob(spec: ModelSpec, params: Params, x, tau: float = 1.0) -> Tensor:
    """softmax(logits / tau), row-wise."""
    return T.exp(T.log_softmax(forward_logits(spec, params, x), tau))


def predict(spec: ModelSpec, params: Params, x) -> np.ndarray:
    """Predicted class per sample; ties go to the lowest index."""
    return forward_logits(spec, params.frozen(), x).data.argmax(axis=1)


@dataclass
class Model:
    """A spec bound to its parameters."""

    spec: ModelSpec
    params: Params = field(repr=False)

    @classmethod
    def create(cls, spec: ModelSpec, seed: int) -> "Model":
        return cls(spec, init_params(spec, seed))

    def __call__(self, x) -> Tensor:
        return forward_logits(self.spec, self.params, x)

    def features(self, x) -> Tensor:
        return penultimate(self.spec, self.params, x)

    def prob(self, x, tau: float = 1.0) -> Tensor:
        return predict_prob(self.spec, self.params, x, tau)

    def predict(self, x) -> np.ndarray:
        return predict(self.spec, self.params, x)

    def frozen(self) -> "Model":
        return Model(self.spec, self.params.frozen())

    def copy(self) -> "Model":
        return Model(self.spec, self.params.copy())


# ---------------------------------------------------------------- checkpoints

MAGIC = b"PAIDCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: Params) -> None:
    """Write ``params`` as little-endian float64 records after a magic/version/seed header."""
    parts = [MAGIC, struct.pack("<Iq", CKPT_VERSION, params.seed), struct.pack("<I", len(params.tensors))]
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, requires_grad: bool = True) -> Params:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError("bad magic")
    try:
        version, seed = struct.unpack_from("<Iq", buf, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack_from("<I", buf, 20)
        pos = 24
        arrays = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(buf):
                raise CheckpointError("truncated payload")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += size
    except struct.error:
        raise CheckpointError("truncated payload") from None
    return Params.from_arrays(arrays, seed=seed, requires_grad=requires_grad)


def infer_spec(params: Params, role: str = "student") -> ModelSpec:
    """Rebuild the spec of a preset-style model from its parameter shapes.

    Dense layers are separated by ReLU; every conv is followed by ReLU and
    a 2x2 pool, and the conv stack is flattened before the first dense
    layer. Image height/width cannot be recovered from the weights, so for
    CNNs the first dense layer's fan-in is assumed to come from a square map.
    """
    weights = [(n, t.shape) for n, t in params.tensors.items() if n.endswith(".weight")]
    if not weights:
        raise SpecError("no weights in checkpoint")
    layers = []
    convs = [s for _, s in weights if len(s) == 4]
    if convs:
        channels = [s[0] for s in convs]
        first_dense = next(s for _, s in weights if len(s) == 2)
        side2 = first_dense[0] // channels[-1]
        side = int(round(np.sqrt(side2))) * 2 ** len(convs)
        input_shape = (convs[0][1], side, side)
        for ch in channels:
            layers += [Conv(ch), ReLU(), Pool()]
        layers.append(Flatten())
    else:
        input_shape = (weights[0][1][0],)
    dense = [s for _, s in weights if len(s) == 2]
    for j, s in enumerate(dense):
        layers.append(Dense(*s))
        if j < len(dense) - 1:
            layers.append(ReLU())
    spec = ModelSpec(input_shape, layers, dense[-1][1], role)
    check_params(spec, params)
    return spec
