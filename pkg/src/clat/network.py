"""Sequential layered models with per-layer feature taps and freeze masks.

A *layer* here is one weight-bearing unit (conv or dense) together with the
activation / pooling / flatten ops that follow it.  Layer ``i`` (1-based) maps
the feature ``F_{i-1}`` to ``F_i``; ``F_n`` is the logit vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, UsageError
from .tensor import Tensor

POSTOPS = ("relu", "maxpool", "avgpool", "flatten")


def parse_postop(token: str) -> tuple[str, int]:
    name, _, size = token.partition(":")
    if name not in POSTOPS:
        raise ConfigurationError(f"unknown post-op {token!r}; expected one of {POSTOPS}")
    if name in ("maxpool", "avgpool"):
        try:
            return name, int(size or 2)
        except ValueError:
            raise ConfigurationError(f"bad pooling size in {token!r}") from None
    if size:
        raise ConfigurationError(f"post-op {name!r} takes no argument")
    return name, 0


@dataclass
class LayerSpec:
    index: int
    kind: str  # "conv" | "dense"
    weight: Tensor
    bias: Tensor
    postops: tuple = ()
    stride: int = 1
    pad: int = 0
    frozen: bool = False

    @property
    def num_params(self) -> int:
        return self.weight.size + self.bias.size

    def describe(self) -> dict:
        d = {"kind": self.kind, "out": int(self.weight.shape[0 if self.kind == "conv" else 1]),
             "postops": list(self.postops)}
        if self.kind == "conv":
            d.update(k=int(self.weight.shape[2]), stride=self.stride, pad=self.pad)
        return d

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = bool(frozen)
        self.weight.requires_grad = not frozen
        self.bias.requires_grad = not frozen

    def __call__(self, z: Tensor) -> Tensor:
        if self.kind == "conv":
            if z.ndim != 4:
                raise DimensionError(f"layer {self.index}: conv expects [N, C, H, W], got {z.shape}")
            z = T.conv2d(z, self.weight, self.bias, self.stride, self.pad)
        else:
            if z.ndim != 2:
                z = T.flatten(z)
            z = T.add_bias(T.matmul(z, self.weight), self.bias)
        for op in self.postops:
            name, size = parse_postop(op)
            if name == "relu":
                z = T.relu(z)
            elif name == "maxpool":
                z = T.maxpool2d(z, size)
            elif name == "avgpool":
                z = T.avgpool2d(z, size)
            else:
                z = T.flatten(z)
        return z


class Census(NamedTuple):
    total: int
    trainable: int
    fraction: float


class Gradients(NamedTuple):
    input: np.ndarray | None
    layers: dict  # layer index -> (weight grad, bias grad)


@dataclass(frozen=True)
class GradientRequest:
    """Which gradients a backward pass should produce."""

    wrt_inputs: bool = False
    wrt_parameters: frozenset = frozenset()


@dataclass
class Network:
    layers: list
    input_shape: tuple
    num_classes: int
    # instrumentation only; never read by the forward computation
    forward_calls: int = field(default=0, compare=False, repr=False)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def layer(self, i: int) -> LayerSpec:
        if not 1 <= i <= len(self.layers):
            raise UsageError(f"layer index {i} out of range 1..{len(self.layers)}")
        return self.layers[i - 1]

    def forward(self, x) -> Tensor:
        return self.forward_with_taps(x, ())[0]

    def forward_with_taps(self, x, taps: Iterable[int] = ()) -> tuple[Tensor, dict]:
        """Logits plus the hidden features ``F_i`` for each requested layer."""
        taps = set(taps)
        bad = [i for i in taps if not (isinstance(i, (int, np.integer)) and 1 <= i <= self.depth)]
        if bad:
            raise UsageError(f"invalid tap layer(s) {sorted(bad, key=str)}; valid range is 1..{self.depth}")
        z = x if isinstance(x, Tensor) else Tensor(x)
        if tuple(z.shape[1:]) != tuple(self.input_shape):
            raise DimensionError(f"input shape {z.shape[1:]} does not match network input {self.input_shape}")
        self.forward_calls += 1
        features = {}
        for spec in self.layers:
            z = spec(z)
            if spec.index in taps:
                features[spec.index] = z
        return z, features

    def feature_dims(self) -> dict:
        """Per-sample element count ``N_i`` of every layer output."""
        dims, shape = {}, tuple(self.input_shape)
        for spec in self.layers:
            shape = _layer_output_shape(spec.describe(), shape, spec.index)
            dims[spec.index] = math.prod(shape)
        return dims

    def set_freeze_mask(self, critical: Iterable[int]) -> None:
        """Unfreeze exactly the layers in ``critical``; freeze the rest."""
        critical = set(critical)
        if not critical:
            raise UsageError("critical set is empty; at least one layer must stay trainable")
        for i in critical:
            self.layer(i)
        for spec in self.layers:
            spec.set_frozen(spec.index not in critical)

    def unfreeze_all(self) -> None:
        for spec in self.layers:
            spec.set_frozen(False)

    def trainable_layers(self) -> tuple:
        return tuple(s.index for s in self.layers if not s.frozen)

    def param_census(self) -> Census:
        total = sum(s.num_params for s in self.layers)
        trainable = sum(s.num_params for s in self.layers if not s.frozen)
        return Census(total, trainable, trainable / total if total else 0.0)

    def gradients(self, loss: Tensor, request: GradientRequest, x: Tensor | None = None) -> Gradients:
        """Run one backward pass for the tensors named by ``request``."""
        wanted = []
        for i in sorted(request.wrt_parameters):
            spec = self.layer(i)
            wanted += [spec.weight, spec.bias]
        if request.wrt_inputs:
            if x is None:
                raise UsageError("input gradient requested but no input tensor given")
            wanted.append(x)
        g = T.backward(loss, wanted)
        layers = {i: (g[self.layer(i).weight], g[self.layer(i).bias]) for i in sorted(request.wrt_parameters)}
        return Gradients(g[x] if request.wrt_inputs else None, layers)

    def architecture(self) -> dict:
        return {"input_shape": list(self.input_shape), "num_classes": self.num_classes,
                "layers": [s.describe() for s in self.layers]}

    def clone(self) -> "Network":
        """Deep copy with fresh parameter tensors (and fresh tape ids)."""
        layers = []
        for spec in self.layers:
            w = Tensor(spec.weight.data.copy(), not spec.frozen)
            b = Tensor(spec.bias.data.copy(), not spec.frozen)
            layers.append(replace(spec, weight=w, bias=b))
        return Network(layers, tuple(self.input_shape), self.num_classes)


def _layer_output_shape(desc: dict, shape: tuple, index: int) -> tuple:
    if desc["kind"] == "conv":
        if len(shape) != 3:
            raise ConfigurationError(f"layer {index}: conv needs a [C, H, W] input, got {shape}")
        k, s, p = desc["k"], desc.get("stride", 1), desc.get("pad", 0)
        shape = (desc["out"], T.conv_output_size(shape[1], k, s, p), T.conv_output_size(shape[2], k, s, p))
    elif desc["kind"] == "dense":
        shape = (desc["out"],)
    else:
        raise ConfigurationError(f"layer {index}: unknown kind {desc['kind']!r}")
    for op in desc.get("postops", ()):
        name, size = parse_postop(op)
        if name in ("maxpool", "avgpool"):
            if len(shape) != 3 or shape[1] % size or shape[2] % size:
                raise ConfigurationError(f"layer {index}: {op} does not tile feature shape {shape}")
            shape = (shape[0], shape[1] // size, shape[2] // size)
        elif name == "flatten":
            shape = (math.prod(shape),)
    return shape


def parse_layer(text: str) -> dict:
    """Parse one layer description, e.g. ``conv 8 k=3 pad=1 relu maxpool:2``."""
    tokens = text.split()
    if len(tokens) < 2 or tokens[0] not in ("conv", "dense"):
        raise ConfigurationError(f"bad layer description {text!r}; expected 'conv OUT ...' or 'dense OUT ...'")
    try:
        desc = {"kind": tokens[0], "out": int(tokens[1]), "postops": []}
    except ValueError:
        raise ConfigurationError(f"bad output width in {text!r}") from None
    if desc["kind"] == "conv":
        desc.update(k=3, stride=1, pad=0)
    for tok in tokens[2:]:
        if "=" in tok:
            key, _, val = tok.partition("=")
            if desc["kind"] != "conv" or key not in ("k", "stride", "pad"):
                raise ConfigurationError(f"unknown layer option {tok!r} in {text!r}")
            try:
                desc[key] = int(val)
            except ValueError:
                raise ConfigurationError(f"bad integer in {tok!r}") from None
        else:
            parse_postop(tok)
            desc["postops"].append(tok)
    return desc


def build_network(layers, input_shape, num_classes: int, seed: int = 0) -> Network:
    """Instantiate a network with He-normal weights and zero biases.

    ``layers`` holds layer dicts (as from :func:`parse_layer` or
    ``Network.architecture()``) or description strings.
    """
    rng = np.random.default_rng(seed)
    descs = [parse_layer(d) if isinstance(d, str) else dict(d) for d in layers]
    if not descs:
        raise ConfigurationError("network needs at least one layer")
    shape = tuple(int(v) for v in input_shape)
    specs = []
    for index, desc in enumerate(descs, start=1):
        in_shape = shape
        shape = _layer_output_shape(desc, shape, index)
        if desc["kind"] == "conv":
            k = desc["k"]
            fan_in = in_shape[0] * k * k
            w = rng.standard_normal((desc["out"], in_shape[0], k, k)) * math.sqrt(2.0 / fan_in)
        else:
            fan_in = math.prod(in_shape)
            w = rng.standard_normal((fan_in, desc["out"])) * math.sqrt(2.0 / fan_in)
        specs.append(LayerSpec(
            index=index, kind=desc["kind"],
            weight=Tensor(w, requires_grad=True),
            bias=Tensor(np.zeros(desc["out"]), requires_grad=True),
            postops=tuple(desc.get("postops", ())),
            stride=int(desc.get("stride", 1)), pad=int(desc.get("pad", 0))))
    if shape != (num_classes,):
        raise ConfigurationError(f"final layer produces {shape}, expected ({num_classes},) logits")
    return Network(specs, tuple(int(v) for v in input_shape), int(num_classes))


def predict(net: Network, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Arg-max class predictions, evaluated without recording a tape."""
    out = []
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(net.forward(Tensor(x[start:start + batch_size])).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
