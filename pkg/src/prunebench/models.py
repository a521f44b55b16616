"""Reference architectures, masked parameters and checkpoint persistence."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, GraphStateError, Precision, Tensor

ARCHITECTURES = ("mlp_300_100", "lenet_conv", "cifar_tinyconv")

DEFAULT_INPUT_SHAPES = {
    "mlp_300_100": (1, 28, 28),
    "lenet_conv": (1, 28, 28),
    "cifar_tinyconv": (3, 32, 32),
}

CHECKPOINT_FORMAT = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ParamTensor:
    """A weight tensor and the binary mask gating it.

    The forward pass always sees ``mask * weights``; stored values at masked
    positions are inert.
    """

    name: str
    weights: Tensor
    mask: np.ndarray
    prunable: bool = True

    def __post_init__(self):
        self.weights.requires_grad = True
        self.weights.name = self.name
        if self.mask.shape != self.weights.shape:
            raise DimensionError(f"{self.name}: mask {self.mask.shape} != weights {self.weights.shape}")
        self.mask = np.ascontiguousarray(self.mask, dtype=np.uint8)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.weights.shape

    @property
    def numel(self) -> int:
        return self.weights.size

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.weights.grad

    def effective(self) -> Tensor:
        return T.masked(self.weights, self.mask)


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.classifier = False

    def params(self) -> list[ParamTensor]:
        return []

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def _check(self, x: Tensor, expected: tuple[int, ...]) -> None:
        if x.shape[1:] != tuple(expected):
            raise DimensionError(f"layer '{self.name}' expects per-example shape {tuple(expected)}, got {x.shape[1:]}")


class Dense(Layer):
    kind = "dense"

    def __init__(self, name: str, in_features: int, out_features: int, dtype=np.float32):
        super().__init__(name)
        if in_features <= 0 or out_features <= 0:
            raise DimensionError(f"layer '{name}': non-positive dims {in_features}x{out_features}")
        self.in_features, self.out_features = in_features, out_features
        self.weight = ParamTensor(f"{name}.weight", Tensor(np.zeros((in_features, out_features), dtype)), np.ones((in_features, out_features), np.uint8))
        self.bias = ParamTensor(f"{name}.bias", Tensor(np.zeros(out_features, dtype)), np.ones(out_features, np.uint8), prunable=False)

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise DimensionError(f"layer '{self.name}' expects ({self.in_features},), got {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x):
        self._check(x, (self.in_features,))
        return T.dense(x, self.weight.effective(), self.bias.weights)


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, name, cin, cout, kh, kw, stride=1, pad=0, dtype=np.float32):
        super().__init__(name)
        if min(cin, cout, kh, kw, stride) <= 0 or pad < 0:
            raise DimensionError(f"layer '{name}': non-positive dims")
        self.cin, self.cout, self.kh, self.kw, self.stride, self.pad = cin, cout, kh, kw, stride, pad
        shape = (cout, cin, kh, kw)
        self.weight = ParamTensor(f"{name}.weight", Tensor(np.zeros(shape, dtype)), np.ones(shape, np.uint8))
        self.bias = ParamTensor(f"{name}.bias", Tensor(np.zeros(cout, dtype)), np.ones(cout, np.uint8), prunable=False)

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.cin:
            raise DimensionError(f"layer '{self.name}' expects ({self.cin}, h, w), got {tuple(in_shape)}")
        try:
            oh = T.conv_output_size(in_shape[1], self.kh, self.stride, self.pad)
            ow = T.conv_output_size(in_shape[2], self.kw, self.stride, self.pad)
        except DimensionError as exc:
            raise DimensionError(f"layer '{self.name}': {exc}") from None
        return (self.cout, oh, ow)

    def forward(self, x):
        if x.data.ndim != 4 or x.shape[1] != self.cin:
            raise DimensionError(f"layer '{self.name}' expects (N, {self.cin}, h, w), got {x.shape}")
        try:
            return T.conv2d(x, self.weight.effective(), self.bias.weights, self.stride, self.pad)
        except DimensionError as exc:
            raise DimensionError(f"layer '{self.name}': {exc}") from None


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return T.relu(x)


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, name, k, stride=None):
        super().__init__(name)
        self.k, self.stride = k, (k if stride is None else stride)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        return (c, T.conv_output_size(h, self.k, self.stride, 0), T.conv_output_size(w, self.k, self.stride, 0))

    def forward(self, x):
        try:
            return T.maxpool2d(x, self.k, self.stride)
        except DimensionError as exc:
            raise DimensionError(f"layer '{self.name}': {exc}") from None


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return T.flatten(x)


class ModelGraph:
    """An ordered stack of layers, ``f(x; mask * W)``."""

    def __init__(self, name: str, layers: Sequence[Layer], input_shape, class_count: int, precision=Precision.BITS32):
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        self.name = name
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.class_count = class_count
        self.precision = Precision(precision)
        self._pending: Optional[Tensor] = None
        shape = self.input_shape
        self.shapes: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
        for layer in self.layers:
            out = layer.output_shape(shape)
            self.shapes.append((shape, out))
            shape = out
        if shape != (class_count,):
            raise DimensionError(f"model '{name}' produces {shape}, expected ({class_count},)")
        weighted = [l for l in self.layers if l.params()]
        weighted[-1].classifier = True

    # -- parameters ---------------------------------------------------------
    def param_tensors(self) -> list[ParamTensor]:
        return [p for layer in self.layers for p in layer.params()]

    def weight_tensors(self) -> list[ParamTensor]:
        """Prunable weight tensors in layer order (biases excluded)."""
        return [p for p in self.param_tensors() if p.prunable]

    def layer_of(self, param: ParamTensor) -> Layer:
        for layer in self.layers:
            if any(p is param for p in layer.params()):
                return layer
        raise KeyError(param.name)

    def named_params(self) -> dict[str, ParamTensor]:
        return {p.name: p for p in self.param_tensors()}

    def zero_grad(self) -> None:
        for p in self.param_tensors():
            p.weights.zero_grad()

    def clone(self) -> "ModelGraph":
        self._pending = None
        return copy.deepcopy(self)

    @property
    def dtype(self) -> np.dtype:
        return self.precision.dtype

    # -- execution ----------------------------------------------------------
    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x), dtype=self.dtype)
        if x.dtype != self.dtype:
            raise TypeError(f"input dtype {x.dtype} does not match model precision {self.precision.value}")
        if x.data.ndim != len(self.input_shape) + 1 or x.shape[1:] != self.input_shape:
            raise DimensionError(f"model '{self.name}' expects input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x)
        self._pending = x
        return x

    __call__ = forward

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every parameter from a scalar loss."""
        if self._pending is None:
            raise GraphStateError("backward called before forward")
        if loss.size != 1:
            raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
        self._pending = None
        loss.backward()

    def predict(self, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        """Logits for many examples, without recording for backward."""
        outs = []
        for i in range(0, len(images), batch_size):
            x = Tensor(images[i : i + batch_size], dtype=self.dtype)
            for layer in self.layers:
                x = layer.forward(x)
            outs.append(x.data)
        self._pending = None
        return np.concatenate(outs, axis=0)

    def __repr__(self):
        return f"ModelGraph({self.name}, layers={[l.name for l in self.layers]})"


def build(arch_id: str, class_count: int = 10, precision=Precision.BITS32, input_shape=None) -> ModelGraph:
    """Construct one of the reference architectures with all-ones masks.

    Weights start at zero; see :func:`prunebench.training.init_weights`.
    ``input_shape`` only matters for ``mlp_300_100``, whose first layer
    takes the flattened input.
    """
    if arch_id not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch_id!r}; choose from {ARCHITECTURES}")
    dt = Precision(precision).dtype
    shape = tuple(input_shape) if input_shape is not None else DEFAULT_INPUT_SHAPES[arch_id]
    if arch_id == "mlp_300_100":
        n_in = int(np.prod(shape))
        layers = [
            Flatten("flatten"),
            Dense("fc1", n_in, 300, dt), ReLU("relu1"),
            Dense("fc2", 300, 100, dt), ReLU("relu2"),
            Dense("fc3", 100, class_count, dt),
        ]
    elif arch_id == "lenet_conv":
        c, h, w = shape
        s1 = ((h - 4) // 2, (w - 4) // 2)
        s2 = ((s1[0] - 4) // 2, (s1[1] - 4) // 2)
        layers = [
            Conv2d("conv1", c, 6, 5, 5, dtype=dt), ReLU("relu1"), MaxPool2d("pool1", 2),
            Conv2d("conv2", 6, 16, 5, 5, dtype=dt), ReLU("relu2"), MaxPool2d("pool2", 2),
            Flatten("flatten"),
            Dense("fc1", 16 * s2[0] * s2[1], 120, dt), ReLU("relu3"),
            Dense("fc2", 120, 84, dt), ReLU("relu4"),
            Dense("fc3", 84, class_count, dt),
        ]
    else:
        c, h, w = shape
        layers = [
            Conv2d("conv1", c, 16, 3, 3, pad=1, dtype=dt), ReLU("relu1"), MaxPool2d("pool1", 2),
            Conv2d("conv2", 16, 32, 3, 3, pad=1, dtype=dt), ReLU("relu2"), MaxPool2d("pool2", 2),
            Flatten("flatten"),
            Dense("fc1", 32 * (h // 4) * (w // 4), 128, dt), ReLU("relu3"),
            Dense("fc2", 128, class_count, dt),
        ]
    return ModelGraph(arch_id, layers, shape, class_count, precision)


# -- checkpoints ------------------------------------------------------------

def _file_stem(name: str) -> str:
    return name.replace("/", "_")


def save(model: ModelGraph, path, metadata: Optional[dict] = None) -> Path:
    """Write ``manifest.json`` plus one ``.bin`` and one ``.mask`` per tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for p in model.param_tensors():
        stem = _file_stem(p.name)
        payload = p.weights.data.astype(p.weights.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        mask = p.mask.astype(np.uint8).tobytes(order="C")
        (path / f"{stem}.bin").write_bytes(payload)
        (path / f"{stem}.mask").write_bytes(mask)
        tensors[p.name] = {
            "shape": list(p.shape),
            "dtype": "float32" if p.weights.dtype == np.float32 else "float64",
            "file": f"{stem}.bin",
            "mask_file": f"{stem}.mask",
            "prunable": p.prunable,
            "sha256": hashlib.sha256(payload).hexdigest(),
            "mask_sha256": hashlib.sha256(mask).hexdigest(),
        }
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "arch_id": model.name,
        "class_count": model.class_count,
        "input_shape": list(model.input_shape),
        "precision": model.precision.value,
        "tensors": tensors,
        "metadata": metadata or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no manifest.json") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    for key in ("arch_id", "class_count", "input_shape", "precision", "tensors"):
        if key not in manifest:
            raise CheckpointError(f"{path}: corrupt manifest, missing {key!r}")
    return manifest


def load(path) -> ModelGraph:
    path = Path(path)
    manifest = read_manifest(path)
    try:
        model = build(manifest["arch_id"], manifest["class_count"], manifest["precision"], manifest["input_shape"])
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    params = model.named_params()
    if set(params) != set(manifest["tensors"]):
        raise CheckpointError(f"{path}: tensor set {sorted(manifest['tensors'])} does not match {manifest['arch_id']}")
    for name, p in params.items():
        entry = manifest["tensors"][name]
        if tuple(entry["shape"]) != p.shape:
            raise CheckpointError(f"tensor {name}: shape {entry['shape']} != expected {list(p.shape)}")
        if entry["dtype"] != str(model.dtype):
            raise CheckpointError(f"tensor {name}: dtype {entry['dtype']} != model precision {model.dtype}")
        try:
            payload = (path / entry["file"]).read_bytes()
            mask = (path / entry["mask_file"]).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"tensor {name}: {exc}") from None
        itemsize = model.dtype.itemsize
        if len(payload) != p.numel * itemsize or len(mask) != p.numel:
            raise CheckpointError(f"tensor {name}: corrupt checkpoint, payload size {len(payload)} / mask size {len(mask)} for {p.numel} elements")
        if "sha256" in entry and hashlib.sha256(payload).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"tensor {name}: corrupt checkpoint, weight checksum mismatch")
        if "mask_sha256" in entry and hashlib.sha256(mask).hexdigest() != entry["mask_sha256"]:
            raise CheckpointError(f"tensor {name}: corrupt checkpoint, mask checksum mismatch")
        m = np.frombuffer(mask, dtype=np.uint8).reshape(p.shape)
        if m.max(initial=0) > 1:
            raise CheckpointError(f"tensor {name}: mask holds values other than 0/1")
        p.weights.data = np.frombuffer(payload, dtype=model.dtype.newbyteorder("<")).astype(model.dtype).reshape(p.shape).copy()
        p.mask = m.copy()
    return model


def iter_weight_layers(model: ModelGraph) -> Iterator[tuple[Layer, tuple, tuple]]:
    """(layer, input shape, output shape) for every conv/dense layer."""
    for layer, (si, so) in zip(model.layers, model.shapes):
        if layer.kind in ("dense", "conv2d"):
            yield layer, si, so
