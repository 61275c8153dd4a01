"""Layer-graph assembly for the CNN and MLP classifiers, plus CNNW1 weight files.

A :class:`ModelSpec` is a declarative, JSON-serializable list of layer
records; :class:`ModelWeights` holds the named tensors (learned parameters
and batchnorm running statistics) in layer order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import layers as L
from .errors import ConfigError, FormatError, ShapeError

WEIGHTS_MAGIC = b"CNNW1"
WEIGHTS_VERSION = 1

PATCH_SIZES = (17, 33)
OUTPUT_UNITS = {"pixel": 1, "patch9": 81}
DEFAULT_WIDTHS = (32, 32, 64, 64)
DEFAULT_HIDDEN = 256


@dataclass
class ModelSpec:
    family: str                      # "cloudnet" or "mlp"
    input_shape: tuple[int, ...]     # (4, P, P) or (features,)
    output_units: int
    layers: list[dict[str, Any]]
    seed: int = 0
    output_mode: str = "pixel"
    # input preparation carried with the weights (feature config, scaling)
    preprocess: dict[str, Any] = field(default_factory=dict)

    @property
    def patch_size(self) -> Optional[int]:
        return self.input_shape[1] if len(self.input_shape) == 3 else None

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "input_shape": list(self.input_shape),
            "output_units": self.output_units,
            "output_mode": self.output_mode,
            "seed": self.seed,
            "layers": [dict(layer) for layer in self.layers],
            "preprocess": dict(self.preprocess),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        spec = cls(
            family=d["family"],
            input_shape=tuple(d["input_shape"]),
            output_units=int(d["output_units"]),
            layers=[dict(layer) for layer in d["layers"]],
            seed=int(d.get("seed", 0)),
            output_mode=d.get("output_mode", "pixel"),
            preprocess=dict(d.get("preprocess", {})),
        )
        validate_spec(spec)
        return spec


@dataclass
class ModelWeights:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = WEIGHTS_VERSION

    def copy(self) -> "ModelWeights":
        return ModelWeights({k: v.copy() for k, v in self.tensors.items()}, self.version)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def _tensor_names(layer: dict) -> list[str]:
    name, kind = layer["name"], layer["kind"]
    if kind in ("conv2d", "dense"):
        return [f"{name}.weight", f"{name}.bias"]
    if kind == "batchnorm2d":
        return [f"{name}.gamma", f"{name}.beta", f"{name}.running_mean", f"{name}.running_var"]
    return []


def learned_names(spec: ModelSpec) -> list[str]:
    """Names of trainable tensors (running statistics excluded)."""
    out = []
    for layer in spec.layers:
        out.extend(n for n in _tensor_names(layer) if not n.endswith((".running_mean", ".running_var")))
    return out


def validate_spec(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Propagate shapes through the layer list; return the per-layer output shapes."""
    shape = tuple(spec.input_shape)
    shapes = []
    seen = set()
    for layer in spec.layers:
        kind = layer.get("kind")
        name = layer.get("name")
        if kind not in L.KINDS:
            raise ShapeError(f"unknown layer kind {kind!r}")
        if name in seen:
            raise ShapeError(f"duplicate layer name {name!r}")
        seen.add(name)
        if kind == "conv2d":
            if len(shape) != 3 or shape[0] != layer["in_channels"]:
                raise ShapeError(f"{name}: expects {layer['in_channels']} channels, input is {shape}")
            k, pad, stride = layer["kernel"], layer["pad"], layer["stride"]
            shape = (layer["out_channels"],
                     L.conv_output_size(shape[1], k, pad, stride),
                     L.conv_output_size(shape[2], k, pad, stride))
        elif kind == "batchnorm2d":
            if len(shape) != 3 or shape[0] != layer["channels"]:
                raise ShapeError(f"{name}: expects {layer['channels']} channels, input is {shape}")
        elif kind == "maxpool2x2":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise ShapeError(f"{name}: cannot pool shape {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            if len(shape) != 1 or shape[0] != layer["in_units"]:
                raise ShapeError(f"{name}: expects {layer['in_units']} features, input is {shape}")
            shape = (layer["out_units"],)
        elif kind == "dropout":
            if not 0.0 <= layer["p"] < 1.0:
                raise ShapeError(f"{name}: drop probability {layer['p']} outside [0, 1)")
        shapes.append(shape)
    if shape != (spec.output_units,):
        raise ShapeError(f"final shape {shape} does not match output_units {spec.output_units}")
    if spec.layers and spec.layers[-1]["kind"] != "sigmoid":
        raise ShapeError("the last layer must be a sigmoid")
    return shapes


def init_weights(spec: ModelSpec, seed: Optional[int] = None) -> ModelWeights:
    """He-normal weights (std = sqrt(2/fan_in)), zero biases, unit gamma."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    tensors: dict[str, np.ndarray] = {}
    for layer in spec.layers:
        name, kind = layer["name"], layer["kind"]
        if kind == "conv2d":
            shape = (layer["out_channels"], layer["in_channels"], layer["kernel"], layer["kernel"])
            fan_in = shape[1] * shape[2] * shape[3]
            tensors[f"{name}.weight"] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            tensors[f"{name}.bias"] = np.zeros(shape[0])
        elif kind == "dense":
            shape = (layer["out_units"], layer["in_units"])
            tensors[f"{name}.weight"] = rng.standard_normal(shape) * np.sqrt(2.0 / shape[1])
            tensors[f"{name}.bias"] = np.zeros(shape[0])
        elif kind == "batchnorm2d":
            c = layer["channels"]
            tensors[f"{name}.gamma"] = np.ones(c)
            tensors[f"{name}.beta"] = np.zeros(c)
            tensors[f"{name}.running_mean"] = np.zeros(c)
            tensors[f"{name}.running_var"] = np.ones(c)
    return ModelWeights(tensors)


def build_cloudnet(patch_size: int, output: str = "pixel", seed: int = 0,
                   widths: Sequence[int] = DEFAULT_WIDTHS, hidden: int = DEFAULT_HIDDEN,
                   kernel: int = 3, channels: int = 4) -> tuple[ModelSpec, ModelWeights]:
    """Two blocks of two conv+BN+ReLU layers with max pooling, then an FC head."""
    if patch_size not in PATCH_SIZES:
        raise ConfigError(f"unsupported patch size {patch_size}; expected one of {PATCH_SIZES}")
    if output not in OUTPUT_UNITS:
        raise ConfigError(f"unsupported output {output!r}; expected pixel or patch9")
    if len(widths) != 4:
        raise ConfigError("cloudnet needs four convolution widths")
    pad = kernel // 2
    layers: list[dict[str, Any]] = []
    in_c = channels
    side = patch_size
    for block in range(2):
        for i in range(2):
            idx = 2 * block + i + 1
            out_c = int(widths[2 * block + i])
            layers.append({"name": f"conv{idx}", "kind": "conv2d", "in_channels": in_c, "out_channels": out_c,
                           "kernel": kernel, "pad": pad, "stride": 1})
            layers.append({"name": f"bn{idx}", "kind": "batchnorm2d", "channels": out_c,
                           "eps": L.BN_EPSILON, "momentum": L.BN_MOMENTUM})
            layers.append({"name": f"relu{idx}", "kind": "relu"})
            in_c = out_c
        layers.append({"name": f"pool{block + 1}", "kind": "maxpool2x2"})
        layers.append({"name": f"drop{block + 1}", "kind": "dropout", "p": 0.25})
        side //= 2
    features = in_c * side * side
    units = OUTPUT_UNITS[output]
    layers += [
        {"name": "flatten", "kind": "flatten"},
        {"name": "fc1", "kind": "dense", "in_units": features, "out_units": int(hidden)},
        {"name": "relu_fc1", "kind": "relu"},
        {"name": "drop3", "kind": "dropout", "p": 0.5},
        {"name": "fc2", "kind": "dense", "in_units": int(hidden), "out_units": units},
        {"name": "sigmoid", "kind": "sigmoid"},
    ]
    spec = ModelSpec("cloudnet", (channels, patch_size, patch_size), units, layers, seed, output)
    validate_spec(spec)
    return spec, init_weights(spec)


def build_mlp(input_dim: int, hidden: Sequence[int] = (), seed: int = 0) -> tuple[ModelSpec, ModelWeights]:
    """Dense+ReLU stack ending in a single sigmoid unit; ``hidden=()`` is logistic regression."""
    if input_dim < 1 or any(h < 1 for h in hidden):
        raise ConfigError(f"invalid MLP dimensions: input {input_dim}, hidden {list(hidden)}")
    layers: list[dict[str, Any]] = []
    prev = int(input_dim)
    for i, h in enumerate(hidden, start=1):
        layers.append({"name": f"fc{i}", "kind": "dense", "in_units": prev, "out_units": int(h)})
        layers.append({"name": f"relu{i}", "kind": "relu"})
        prev = int(h)
    layers.append({"name": "out", "kind": "dense", "in_units": prev, "out_units": 1})
    layers.append({"name": "sigmoid", "kind": "sigmoid"})
    spec = ModelSpec("mlp", (int(input_dim),), 1, layers, seed, "pixel")
    validate_spec(spec)
    return spec, init_weights(spec)


def parameter_count(spec: ModelSpec, weights: ModelWeights) -> int:
    return int(sum(weights[n].size for n in learned_names(spec)))


def forward(spec: ModelSpec, weights: ModelWeights, x: np.ndarray, training: bool = False,
            rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, Optional[list]]:
    """Run the network; returns predictions of shape (n, output_units) and per-layer caches."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != tuple(spec.input_shape):
        raise ShapeError(f"input shape {x.shape[1:]} does not match model input {tuple(spec.input_shape)}")
    caches = [] if training else None
    t = weights.tensors
    for layer in spec.layers:
        kind, name = layer["kind"], layer["name"]
        if kind == "conv2d":
            x, cache = L.conv2d_forward(x, t[f"{name}.weight"], t[f"{name}.bias"], layer["pad"],
                                        layer["stride"], training)
        elif kind == "batchnorm2d":
            x, cache = L.batchnorm2d_forward(x, t[f"{name}.gamma"], t[f"{name}.beta"],
                                             t[f"{name}.running_mean"], t[f"{name}.running_var"], training,
                                             layer.get("eps", L.BN_EPSILON), layer.get("momentum", L.BN_MOMENTUM))
        elif kind == "maxpool2x2":
            x, cache = L.maxpool2x2_forward(x, training)
        elif kind == "dense":
            x, cache = L.dense_forward(x, t[f"{name}.weight"], t[f"{name}.bias"], training)
        elif kind in ("relu", "sigmoid"):
            x, cache = L.activation_forward(kind, x, training)
        elif kind == "dropout":
            x, cache = L.dropout_forward(x, layer["p"], training, rng)
        elif kind == "flatten":
            x, cache = L.flatten_forward(x, training)
        else:
            raise ShapeError(f"unknown layer kind {kind!r}")
        if training:
            caches.append(cache)
    return x, caches


def backward(spec: ModelSpec, caches: list, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse pass from d(loss)/d(predictions) to gradients of every learned tensor."""
    if caches is None or len(caches) != len(spec.layers):
        raise ValueError("backward needs the caches of a training-mode forward pass")
    grads: dict[str, np.ndarray] = {}
    g = grad_out
    last = len(spec.layers) - 1
    for i, (layer, cache) in enumerate(zip(reversed(spec.layers), reversed(caches))):
        g, pgrads = L.layer_backward(layer["kind"], cache, g, need_input_grad=i < last)
        for key, value in pgrads.items():
            grads[f"{layer['name']}.{key}"] = value
    return grads


def predict(spec: ModelSpec, weights: ModelWeights, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode predictions in batches, as a float64 (n, output_units) array."""
    out = np.empty((len(x), spec.output_units))
    for start in range(0, len(x), batch_size):
        out[start:start + batch_size], _ = forward(spec, weights, x[start:start + batch_size], training=False)
    return out


def _weight_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def save_weights(spec: ModelSpec, weights: ModelWeights, path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (CNNW1 blob of float32 LE)."""
    manifest_path, blob_path = _weight_paths(path)
    names = [n for layer in spec.layers for n in _tensor_names(layer)]
    missing = [n for n in names if n not in weights.tensors]
    if missing:
        raise ShapeError(f"weights lack tensors {missing}")
    entries = []
    chunks = [WEIGHTS_MAGIC]
    for name in names:
        arr = np.asarray(weights[name])
        entries.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.astype("<f4").tobytes())
    manifest = {"format": WEIGHTS_MAGIC.decode(), "version": weights.version, "dtype": "float32-le",
                "spec": spec.to_dict(), "tensors": entries}
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.write_text(json.dumps(manifest, indent=1))
    blob_path.write_bytes(b"".join(chunks))
    return manifest_path, blob_path


def load_weights(path) -> tuple[ModelSpec, ModelWeights]:
    manifest_path, blob_path = _weight_paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read weight manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != WEIGHTS_MAGIC.decode() or manifest.get("version") != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weight format {manifest.get('format')!r} "
                          f"version {manifest.get('version')!r}")
    spec = ModelSpec.from_dict(manifest["spec"])
    blob = blob_path.read_bytes()
    if blob[:len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise FormatError(f"{blob_path}: bad magic {blob[:len(WEIGHTS_MAGIC)]!r}, expected {WEIGHTS_MAGIC!r}")
    expected_names = [n for layer in spec.layers for n in _tensor_names(layer)]
    declared = [e["name"] for e in manifest["tensors"]]
    if declared != expected_names:
        raise FormatError(f"tensor manifest {declared} does not match the model layers {expected_names}")
    offset = len(WEIGHTS_MAGIC)
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(blob):
            raise FormatError(f"{blob_path}: truncated blob, tensor {entry['name']!r} missing "
                              f"(needs {nbytes} bytes at offset {offset}, file has {len(blob)})")
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4,
                                               offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{blob_path}: {len(blob) - offset} trailing bytes after the last tensor")
    # init_weights reproduces the expected shapes; any disagreement is a manifest error
    reference = init_weights(spec)
    for name, arr in reference.tensors.items():
        if tensors[name].shape != arr.shape:
            raise FormatError(f"tensor {name!r} has shape {tensors[name].shape}, model expects {arr.shape}")
    return spec, ModelWeights(tensors, manifest["version"])

