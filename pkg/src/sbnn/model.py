"""In-memory layer graph and the JSON manifest + raw float32 blob format.

A manifest is a JSON object::

    {"input": "input",
     "layers": [{"name": ..., "op": ..., "in_shape": [n, h, w, c],
                 "out_shape": [n, h, w, c], "stride": 1, "pad": 0,
                 "kernel": [kh, kw], "weight_blob": "conv1.w.bin",
                 "bias_blob": "conv1.b.bin", "sparse": true,
                 "inputs": ["previous-layer-name"]}, ...]}

``kernel``, ``inputs`` and ``sparse`` are optional.  Blobs are little-endian
float32 files resolved against the weights directory (defaults to the
manifest's directory).  Weights are stored in ``(oc, kh, kw, ic)`` order.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DTYPE

WEIGHTED_OPS = {"conv2d", "conv1x1", "dwconv", "fc"}
ACTIVATION_OPS = {"relu", "relu6"}
POOL_OPS = {"avgpool", "maxpool"}
KNOWN_OPS = WEIGHTED_OPS | ACTIVATION_OPS | POOL_OPS | {"softmax", "concat", "add"}


class ManifestError(ValueError):
    """Raised for structurally invalid manifests or blobs."""


@dataclass
class Layer:
    name: str
    op: str
    in_shape: tuple[int, int, int, int]
    out_shape: tuple[int, int, int, int]
    stride: int = 1
    pad: int = 0
    kernel: tuple[int, int] = (1, 1)
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    inputs: list[str] = field(default_factory=list)
    sparse: bool = True

    @property
    def weight_shape(self) -> tuple[int, int, int, int] | None:
        kh, kw = self.kernel
        ic = self.in_shape[3]
        oc = self.out_shape[3]
        if self.op == "conv1x1":
            return (oc, 1, 1, ic)
        if self.op == "conv2d":
            return (oc, kh, kw, ic)
        if self.op == "dwconv":
            return (oc, kh, kw, 1)
        if self.op == "fc":
            _, h, w, c = self.in_shape
            return (oc, 1, 1, h * w * c)
        return None

    def dense_macs(self) -> int:
        ws = self.weight_shape
        if ws is None:
            return 0
        _, oh, ow, _ = self.out_shape
        n = self.out_shape[0]
        return int(n * oh * ow * np.prod(ws))


@dataclass
class Model:
    layers: list[Layer]
    input_name: str = "input"

    def __post_init__(self):
        prev = self.input_name
        for layer in self.layers:
            if not layer.inputs:
                layer.inputs = [prev]
            prev = layer.name

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        return self.layers[0].in_shape

    @property
    def output_name(self) -> str:
        return self.layers[-1].name

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def children(self, name: str) -> list[Layer]:
        return [lay for lay in self.layers if name in lay.inputs]

    def is_chain(self) -> bool:
        prev = self.input_name
        for layer in self.layers:
            if layer.inputs != [prev]:
                return False
            prev = layer.name
        return True

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def dense_macs(self) -> int:
        return sum(layer.dense_macs() for layer in self.layers)


def _shape4(value, what: str) -> tuple[int, int, int, int]:
    if not isinstance(value, (list, tuple)) or len(value) != 4 or not all(
            isinstance(v, int) and v > 0 for v in value):
        raise ManifestError(f"{what} must be a list of 4 positive ints, got {value!r}")
    return tuple(value)


def read_blob(path: Path, count: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) != 4 * count:
        raise ManifestError(f"blob {path} holds {len(raw) // 4} floats, expected {count}")
    return np.frombuffer(raw, dtype="<f4").astype(DTYPE)


def write_blob(path: Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def parse_manifest(doc: dict, weights_dir: Path | None = None) -> Model:
    """Build a :class:`Model` from a decoded manifest; blobs load if ``weights_dir`` is set."""
    if not isinstance(doc, dict) or not isinstance(doc.get("layers"), list):
        raise ManifestError("manifest must be an object with a 'layers' list")
    layers, seen = [], set()
    for i, entry in enumerate(doc["layers"]):
        if not isinstance(entry, dict):
            raise ManifestError(f"layers[{i}] must be an object")
        for key in ("name", "op", "in_shape", "out_shape"):
            if key not in entry:
                raise ManifestError(f"layers[{i}] is missing '{key}'")
        name, op = entry["name"], entry["op"]
        if not isinstance(name, str) or not name or name in seen:
            raise ManifestError(f"layers[{i}] has an empty or duplicate name {name!r}")
        if op not in KNOWN_OPS:
            raise ManifestError(f"layer {name!r}: unknown op {op!r}")
        seen.add(name)
        default_k = 3 if op == "dwconv" else 1
        kernel = tuple(entry.get("kernel", (default_k, default_k)))
        if len(kernel) != 2:
            raise ManifestError(f"layer {name!r}: kernel must be [kh, kw]")
        layer = Layer(
            name=name, op=op,
            in_shape=_shape4(entry["in_shape"], f"layer {name!r} in_shape"),
            out_shape=_shape4(entry["out_shape"], f"layer {name!r} out_shape"),
            stride=int(entry.get("stride", 1)), pad=int(entry.get("pad", 0)),
            kernel=kernel, inputs=list(entry.get("inputs", [])),
            sparse=bool(entry.get("sparse", True)),
        )
        ws = layer.weight_shape
        if ws is not None and weights_dir is not None:
            for key in ("weight_blob", "bias_blob"):
                if key not in entry:
                    raise ManifestError(f"layer {name!r} is missing '{key}'")
            layer.weight = read_blob(weights_dir / entry["weight_blob"], int(np.prod(ws))).reshape(ws)
            layer.bias = read_blob(weights_dir / entry["bias_blob"], ws[0])
        layers.append(layer)
    model = Model(layers, doc.get("input", "input"))
    names = {model.input_name} | seen
    for layer in model.layers:
        for parent in layer.inputs:
            if parent not in names:
                raise ManifestError(f"layer {layer.name!r} reads unknown input {parent!r}")
    return model


def load_model(manifest_path, weights_dir=None, with_weights: bool = True) -> Model:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: invalid JSON ({exc})") from exc
    wdir = Path(weights_dir) if weights_dir is not None else manifest_path.parent
    return parse_manifest(doc, wdir if with_weights else None)


def manifest_dict(model: Model) -> dict:
    layers = []
    for layer in model.layers:
        entry = {
            "name": layer.name, "op": layer.op,
            "in_shape": list(layer.in_shape), "out_shape": list(layer.out_shape),
            "stride": layer.stride, "pad": layer.pad, "kernel": list(layer.kernel),
            "inputs": list(layer.inputs), "sparse": layer.sparse,
        }
        if layer.weight_shape is not None:
            entry["weight_blob"] = f"{layer.name}.weight.bin"
            entry["bias_blob"] = f"{layer.name}.bias.bin"
        layers.append(entry)
    return {"input": model.input_name, "layers": layers}


def save_model(model: Model, out_dir) -> Path:
    """Write ``manifest.json`` and one blob per weight/bias tensor into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = manifest_dict(model)
    for layer in model.layers:
        if layer.weight_shape is None:
            continue
        if layer.weight is None or layer.bias is None:
            raise ManifestError(f"layer {layer.name!r} has no weights to save")
        write_blob(out_dir / f"{layer.name}.weight.bin", layer.weight)
        write_blob(out_dir / f"{layer.name}.bias.bin", layer.bias)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def mobilenet_v1(resolution: int = 224, width: float = 1.0, num_classes: int = 1000,
                 seed: int | None = 0, activation: str = "relu6") -> Model:
    """MobileNet-v1 layer graph with BN folded; random He-scaled weights when ``seed`` is not None."""
    def ch(c):
        return max(8, int(c * width))

    rng = np.random.default_rng(seed) if seed is not None else None
    layers: list[Layer] = []
    h = w = resolution
    c = 3

    def add(name, op, oc, k=1, stride=1, pad=0):
        nonlocal h, w, c
        if op in ("conv2d", "dwconv"):
            oh, ow = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
        else:
            oh, ow = h, w
        layer = Layer(name, op, (1, h, w, c), (1, oh, ow, oc), stride, pad, (k, k))
        layers.append(layer)
        h, w, c = oh, ow, oc
        layers.append(Layer(f"{name}_{activation}", activation, (1, h, w, c), (1, h, w, c)))

    add("conv1", "conv2d", ch(32), 3, 2, 1)
    cfg = [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
           (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1)]
    for i, (oc, s) in enumerate(cfg, start=1):
        add(f"dw{i}", "dwconv", c, 3, s, 1)
        add(f"pw{i}", "conv1x1", ch(oc))
    layers.append(Layer("pool", "avgpool", (1, h, w, c), (1, 1, 1, c), h, 0, (h, w)))
    layers.append(Layer("fc", "fc", (1, 1, 1, c), (1, 1, 1, num_classes)))
    layers.append(Layer("softmax", "softmax", (1, 1, 1, num_classes), (1, 1, 1, num_classes)))
    model = Model(layers)
    if rng is not None:
        randomize_weights(model, rng)
    return model


def randomize_weights(model: Model, rng: np.random.Generator) -> Model:
    for layer in model.layers:
        ws = layer.weight_shape
        if ws is None:
            continue
        fan_in = int(np.prod(ws[1:]))
        layer.weight = (rng.standard_normal(ws) * np.sqrt(2.0 / fan_in)).astype(DTYPE)
        layer.bias = (rng.standard_normal(ws[0]) * 0.01).astype(DTYPE)
    return model
