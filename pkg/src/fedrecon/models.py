"""Fixed desk-scale architectures with deterministic seeded initialization.

Three families:
  - mlp:         flatten -> fc(hidden) -> sigmoid -> fc(classes)
  - lenet_small: 3 stride-2 5x5 convs (sigmoid) -> fc; channel width 12,
                 scaled by width_scale
  - convmini:    7 3x3 convs (relu) with 2 max-pools -> fc; base width 64,
                 scaled by width_scale; batch-norm deliberately absent so
                 samples in a batch never couple

All parameters live in one flat float64 vector with a declared layout;
initialization is uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer,
drawn in layout order from a PCG64 generator seeded by the model seed.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .engine import LayoutEntry, Tensor, one_hot, ops
from .errors import ConfigError, LayoutMismatchError, ShapeMismatchError

_MLP_HIDDEN = 32
_LENET_WIDTH = 12
_CONVMINI_WIDTH = 64


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple
    num_classes: int
    width_scale: float = 1.0

    def __post_init__(self):
        if self.name not in ("mlp", "lenet_small", "convmini"):
            raise ConfigError(f"unknown architecture {self.name!r}")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ConfigError(f"input_shape must be (C,H,W) positive, got {self.input_shape}")
        if self.num_classes < 1 or self.width_scale <= 0:
            raise ConfigError("num_classes and width_scale must be positive")


@dataclass(frozen=True)
class _Layer:
    kind: str  # conv | fc | sigmoid | relu | maxpool | flatten
    w: str = ""
    b: str = ""
    stride: int = 1
    pad: int = 0
    pool: int = 2


def _round_width(base: int, scale: float) -> int:
    return max(1, int(round(base * scale)))


def _plan(spec: ArchSpec):
    """Layer sequence plus named parameter shapes, in layout order."""
    c, h, w = spec.input_shape
    layers: list = []
    shapes: dict = {}

    def conv(name, cin, cout, k, stride, pad):
        shapes[f"{name}.w"] = (cout, cin, k, k)
        shapes[f"{name}.b"] = (cout,)
        layers.append(_Layer("conv", w=f"{name}.w", b=f"{name}.b", stride=stride, pad=pad))

    def fc(name, fin, fout):
        shapes[f"{name}.w"] = (fin, fout)
        shapes[f"{name}.b"] = (fout,)
        layers.append(_Layer("fc", w=f"{name}.w", b=f"{name}.b"))

    if spec.name == "mlp":
        hidden = _round_width(_MLP_HIDDEN, spec.width_scale)
        layers.append(_Layer("flatten"))
        fc("fc1", c * h * w, hidden)
        layers.append(_Layer("sigmoid"))
        fc("fc2", hidden, spec.num_classes)
    elif spec.name == "lenet_small":
        ch = _round_width(_LENET_WIDTH, spec.width_scale)
        sh, sw = h, w
        cin = c
        for i in range(3):
            conv(f"conv{i + 1}", cin, ch, 5, 2, 2)
            layers.append(_Layer("sigmoid"))
            sh = (sh + 2 * 2 - 5) // 2 + 1
            sw = (sw + 2 * 2 - 5) // 2 + 1
            if sh < 1 or sw < 1:
                raise ConfigError(f"input {spec.input_shape} too small for lenet_small")
            cin = ch
        layers.append(_Layer("flatten"))
        fc("fc", ch * sh * sw, spec.num_classes)
    else:  # convmini
        wbase = _round_width(_CONVMINI_WIDTH, spec.width_scale)
        plan = [
            ("conv", c, wbase),
            ("conv", wbase, wbase),
            ("pool", 0, 0),
            ("conv", wbase, 2 * wbase),
            ("conv", 2 * wbase, 2 * wbase),
            ("pool", 0, 0),
            ("conv", 2 * wbase, 2 * wbase),
            ("conv", 2 * wbase, 2 * wbase),
            ("conv", 2 * wbase, 2 * wbase),
        ]
        sh, sw = h, w
        ci = 0
        for kind, cin, cout in plan:
            if kind == "pool":
                if sh % 2 or sw % 2:
                    raise ConfigError(f"input {spec.input_shape} does not tile convmini pools")
                layers.append(_Layer("maxpool", pool=2))
                sh //= 2
                sw //= 2
            else:
                ci += 1
                conv(f"conv{ci}", cin, cout, 3, 1, 1)
                layers.append(_Layer("relu"))
        layers.append(_Layer("flatten"))
        fc("fc", 2 * wbase * sh * sw, spec.num_classes)

    layout = []
    offset = 0
    for name, shape in shapes.items():
        layout.append(LayoutEntry(name, tuple(shape), offset))
        offset += int(np.prod(shape, dtype=np.int64))
    return layers, tuple(layout), offset


def _fan_in(entry: LayoutEntry, shapes: dict) -> int:
    shape = entry.shape
    if entry.name.endswith(".b"):
        shape = shapes[entry.name[:-2] + ".w"]
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


@dataclass
class Model:
    """Architecture plus one flat parameter vector; immutable by convention."""

    spec: ArchSpec
    seed: int
    values: np.ndarray
    layout: tuple = field(repr=False)
    _layers: list = field(repr=False, default_factory=list)

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def param_values(self) -> np.ndarray:
        return self.values

    def with_values(self, values: np.ndarray) -> "Model":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise LayoutMismatchError(
                f"parameter vector has {values.size} entries, model needs {self.values.size}"
            )
        return Model(self.spec, self.seed, values, self.layout, self._layers)

    def _check_inputs(self, shape) -> None:
        if tuple(shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeMismatchError(
                f"inputs {tuple(shape)} do not match input_shape {self.spec.input_shape}"
            )

    def forward_graph(self, params: list, inputs: Tensor) -> Tensor:
        """(B, C, H, W) inputs -> (B, num_classes) logits."""
        self._check_inputs(inputs.shape)
        named = {entry.name: p for entry, p in zip(self.layout, params)}
        t = inputs
        for layer in self._layers:
            if layer.kind == "conv":
                t = ops.bias_add(
                    ops.conv2d(t, named[layer.w], (layer.stride, layer.stride), (layer.pad, layer.pad)),
                    named[layer.b],
                )
            elif layer.kind == "fc":
                t = ops.bias_add(ops.matmul(t, named[layer.w]), named[layer.b])
            elif layer.kind == "sigmoid":
                t = ops.sigmoid(t)
            elif layer.kind == "relu":
                t = ops.relu(t)
            elif layer.kind == "maxpool":
                t = ops.maxpool2d(t, layer.pool)
            else:
                t = ops.flatten(t)
        return t

    def loss_graph(self, params: list, inputs: Tensor, labels) -> Tensor:
        onehot = one_hot(labels, self.spec.num_classes)
        if onehot.shape[0] != inputs.shape[0]:
            raise ShapeMismatchError(
                f"batch of {inputs.shape[0]} inputs vs {onehot.shape[0]} labels"
            )
        return ops.softmax_xent(self.forward_graph(params, inputs), onehot)

    def forward(self, inputs) -> np.ndarray:
        """Pure logits evaluation (no gradients recorded)."""
        params = [
            Tensor(self.values[e.offset : e.offset + e.size].reshape(e.shape))
            for e in self.layout
        ]
        return self.forward_graph(params, Tensor(np.asarray(inputs, dtype=np.float64))).data


def parameter_count(spec: ArchSpec) -> int:
    _, _, dim = _plan(spec)
    return dim


def build_model(spec: ArchSpec, seed: int) -> Model:
    layers, layout, dim = _plan(spec)
    shapes = {e.name: e.shape for e in layout}
    rng = np.random.Generator(np.random.PCG64(seed))
    values = np.empty(dim)
    for entry in layout:
        bound = 1.0 / np.sqrt(_fan_in(entry, shapes))
        values[entry.offset : entry.offset + entry.size] = rng.uniform(
            -bound, bound, size=entry.size
        )
    return Model(spec, seed, values, layout, layers)


# ------------------------------------------------------------- serialization

_MAGIC_NOTE = "# fedrecon flat parameter layout"


def save_params(model: Model, path) -> None:
    """Flat binary: uint64 little-endian count, then float64 little-endian
    values in layout order. A `<path>.layout` text sidecar records the
    architecture and the layout partition."""
    values = model.values.astype("<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", values.size))
        fh.write(values.tobytes())
    spec = model.spec
    lines = [
        _MAGIC_NOTE,
        f"arch {spec.name} input {spec.input_shape[0]}x{spec.input_shape[1]}x{spec.input_shape[2]} "
        f"classes {spec.num_classes} width_scale {spec.width_scale!r} seed {model.seed}",
    ]
    if spec.name == "lenet_small":
        ch = _round_width(_LENET_WIDTH, spec.width_scale)
        lines.append(f"# lenet_small geometry: channels {ch}/{ch}/{ch}, 5x5 kernels, stride 2, pad 2, sigmoid")
    lines += [f"{e.name} {e.offset} {' '.join(map(str, e.shape))}" for e in model.layout]
    with open(f"{path}.layout", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path, spec: ArchSpec, seed: int = -1) -> Model:
    """Reads the flat binary back into a model built from `spec`."""
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise LayoutMismatchError(f"{path}: truncated header")
        (count,) = struct.unpack("<Q", header)
        raw = fh.read(8 * count)
        if len(raw) != 8 * count:
            raise LayoutMismatchError(f"{path}: expected {count} values, file truncated")
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    model = build_model(spec, seed=0)
    if values.size != model.dim:
        raise LayoutMismatchError(
            f"{path}: holds {values.size} parameters, {spec.name} needs {model.dim}"
        )
    out = model.with_values(values)
    return Model(spec, seed, out.values, out.layout, out._layers)
