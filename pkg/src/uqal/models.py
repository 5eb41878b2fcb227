"""Network specs, initialization, SGD training and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, RngStream, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "uqal-checkpoint"
CHECKPOINT_VERSION = 1

LAYER_KINDS = ("dense", "conv", "relu", "dropout", "flatten", "upsample")
DROPOUT_MODES = ("none", "ad-hoc", "post-hoc")
DROPOUT_GRID = (0.1, 0.3, 0.5)


class SpecError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    rate: float = 0.0
    factor: int = 1

    @staticmethod
    def dense(n_in: int, n_out: int) -> "LayerSpec":
        return LayerSpec("dense", in_features=n_in, out_features=n_out)

    @staticmethod
    def conv(c_in: int, c_out: int, kernel: int = 3, stride: int = 1, padding: int = 1) -> "LayerSpec":
        return LayerSpec("conv", in_channels=c_in, out_channels=c_out, kernel=kernel, stride=stride, padding=padding)

    @staticmethod
    def relu() -> "LayerSpec":
        return LayerSpec("relu")

    @staticmethod
    def dropout(rate: float) -> "LayerSpec":
        return LayerSpec("dropout", rate=rate)

    @staticmethod
    def flatten() -> "LayerSpec":
        return LayerSpec("flatten")

    @staticmethod
    def upsample(factor: int) -> "LayerSpec":
        return LayerSpec("upsample", factor=factor)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for k, v in asdict(self).items():
            if k != "kind" and v != LayerSpec.__dataclass_fields__[k].default:
                d[k] = v
        return d

    @staticmethod
    def from_dict(d: Mapping) -> "LayerSpec":
        return LayerSpec(**d)

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv")


def _layer_out_shape(layer: LayerSpec, shape: tuple, idx: int) -> tuple:
    k = layer.kind
    if k == "dense":
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise SpecError(f"layer {idx}: dense expects ({layer.in_features},), got {shape}")
        if layer.out_features < 1:
            raise SpecError(f"layer {idx}: dense needs positive out_features")
        return (layer.out_features,)
    if k == "conv":
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise SpecError(f"layer {idx}: conv expects {layer.in_channels} channels, got {shape}")
        c, h, w = shape
        if layer.kernel > h + 2 * layer.padding or layer.kernel > w + 2 * layer.padding or layer.stride < 1:
            raise SpecError(f"layer {idx}: kernel does not fit input {shape}")
        ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        return (layer.out_channels, ho, wo)
    if k in ("relu", "dropout"):
        if k == "dropout" and not 0.0 <= layer.rate < 1.0:
            raise SpecError(f"layer {idx}: dropout rate {layer.rate} outside [0, 1)")
        return shape
    if k == "flatten":
        return (int(np.prod(shape)),)
    if k == "upsample":
        if len(shape) != 3 or layer.factor < 1:
            raise SpecError(f"layer {idx}: upsample needs a C×H×W input")
        return (shape[0], shape[1] * layer.factor, shape[2] * layer.factor)
    raise SpecError(f"layer {idx}: unknown kind {k!r}")


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture plus dropout placement.

    ``dropout_mode`` is ``none`` (no stochastic layers), ``ad-hoc`` (dropout
    layers in ``layers``, active in training and sampling) or ``post-hoc``
    (dropout of ``posthoc_rate`` injected after ``posthoc_sites`` at sampling
    time only).
    """

    layers: tuple
    input_shape: tuple
    num_classes: int
    dropout_mode: str = "none"
    posthoc_sites: tuple = ()
    posthoc_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "posthoc_sites", tuple(int(s) for s in self.posthoc_sites))
        if self.dropout_mode not in DROPOUT_MODES:
            raise SpecError(f"unknown dropout mode {self.dropout_mode!r}")
        if self.num_classes < 2:
            raise SpecError("need at least two classes")
        has_dropout = any(l.kind == "dropout" for l in self.layers)
        if self.dropout_mode == "ad-hoc" and not has_dropout:
            raise SpecError("ad-hoc mode requires dropout layers")
        if self.dropout_mode != "ad-hoc" and has_dropout:
            raise SpecError(f"{self.dropout_mode} mode must not contain dropout layers")
        if self.dropout_mode == "post-hoc":
            if not self.posthoc_sites:
                raise SpecError("post-hoc mode requires injection sites")
            if not 0.0 <= self.posthoc_rate < 1.0:
                raise SpecError("post-hoc rate outside [0, 1)")
            for s in self.posthoc_sites:
                if not 0 <= s < len(self.layers):
                    raise SpecError(f"injection site {s} out of range")
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            shapes.append(_layer_out_shape(layer, shapes[-1], i))
        out = shapes[-1]
        if out[0] != self.num_classes or len(out) not in (1, 3):
            raise SpecError(f"network output {out} does not end in {self.num_classes} classes")
        object.__setattr__(self, "_shapes", tuple(shapes))

    @property
    def shapes(self) -> tuple:
        return self._shapes

    @property
    def is_segmenter(self) -> bool:
        return len(self._shapes[-1]) == 3

    @property
    def stochastic(self) -> bool:
        if self.dropout_mode == "ad-hoc":
            return any(l.rate > 0 for l in self.layers if l.kind == "dropout")
        return self.dropout_mode == "post-hoc" and self.posthoc_rate > 0

    @property
    def feature_layer(self) -> int:
        """Index of the last parametrized layer; layers before it produce the penultimate features."""
        return max(i for i, l in enumerate(self.layers) if l.has_params)

    def with_posthoc(self, rate: float, sites: Optional[Sequence[int]] = None) -> "NetworkSpec":
        if self.dropout_mode != "none":
            raise SpecError("post-hoc injection needs a spec without dropout")
        if sites is None:
            sites = default_posthoc_sites(self)
        return NetworkSpec(self.layers, self.input_shape, self.num_classes, "post-hoc", tuple(sites), rate)

    def without_dropout(self) -> "NetworkSpec":
        """Same parameter layout with dropout layers kept at rate 0 (deterministic twin)."""
        if self.dropout_mode == "post-hoc":
            return NetworkSpec(self.layers, self.input_shape, self.num_classes)
        return self

    def to_dict(self) -> dict:
        return {
            "layers": [l.to_dict() for l in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "dropout_mode": self.dropout_mode,
            "posthoc_sites": list(self.posthoc_sites),
            "posthoc_rate": self.posthoc_rate,
        }

    @staticmethod
    def from_dict(d: Mapping) -> "NetworkSpec":
        return NetworkSpec(
            layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            dropout_mode=d.get("dropout_mode", "none"),
            posthoc_sites=tuple(d.get("posthoc_sites", ())),
            posthoc_rate=float(d.get("posthoc_rate", 0.0)),
        )


def default_posthoc_sites(spec: NetworkSpec) -> tuple:
    # after every relu: for MLPs that is after each hidden dense layer, for
    # convnets after each conv block
    return tuple(i for i, l in enumerate(spec.layers) if l.kind == "relu")


def mlp_spec(input_dim: int, hidden: Sequence[int], num_classes: int,
             dropout_mode: str = "none", rate: float = 0.0) -> NetworkSpec:
    layers = []
    n_in = input_dim
    for h in hidden:
        layers += [LayerSpec.dense(n_in, h), LayerSpec.relu()]
        if dropout_mode == "ad-hoc":
            layers.append(LayerSpec.dropout(rate))
        n_in = h
    layers.append(LayerSpec.dense(n_in, num_classes))
    spec = NetworkSpec(tuple(layers), (input_dim,), num_classes,
                       "ad-hoc" if dropout_mode == "ad-hoc" else "none")
    if dropout_mode == "post-hoc":
        spec = spec.with_posthoc(rate)
    return spec


def segmenter_spec(channels: int, height: int, width: int, num_classes: int,
                   width_mult: int = 8, dropout_mode: str = "none", rate: float = 0.0) -> NetworkSpec:
    """Small encoder-decoder: three conv blocks down (one strided), upsample, conv up."""
    w = width_mult
    blocks = [
        LayerSpec.conv(channels, w, 3, 1, 1),
        LayerSpec.conv(w, 2 * w, 3, 2, 1),
        LayerSpec.conv(2 * w, 2 * w, 3, 1, 1),
    ]
    layers = []
    for conv in blocks:
        layers += [conv, LayerSpec.relu()]
        if dropout_mode == "ad-hoc":
            layers.append(LayerSpec.dropout(rate))
    layers += [LayerSpec.upsample(2), LayerSpec.conv(2 * w, w, 3, 1, 1), LayerSpec.relu()]
    if dropout_mode == "ad-hoc":
        layers.append(LayerSpec.dropout(rate))
    layers.append(LayerSpec.conv(w, num_classes, 1, 1, 0))
    spec = NetworkSpec(tuple(layers), (channels, height, width), num_classes,
                       "ad-hoc" if dropout_mode == "ad-hoc" else "none")
    if dropout_mode == "post-hoc":
        spec = spec.with_posthoc(rate)
    return spec


class Parameters(dict):
    """Mapping layer index -> {name: array}. Arrays are read-only once frozen."""

    def freeze(self) -> "Parameters":
        for tensors in self.values():
            for arr in tensors.values():
                arr.flags.writeable = False
        return self

    @property
    def frozen(self) -> bool:
        return all(not a.flags.writeable for t in self.values() for a in t.values())

    def copy(self) -> "Parameters":
        return Parameters({i: {k: np.array(v) for k, v in t.items()} for i, t in self.items()})

    def equal(self, other: "Parameters") -> bool:
        if sorted(self) != sorted(other):
            return False
        for i in self:
            if sorted(self[i]) != sorted(other[i]):
                return False
            for k in self[i]:
                a, b = self[i][k], other[i][k]
                if a.shape != b.shape or not np.array_equal(a, b):
                    return False
        return True


def init_params(spec: NetworkSpec, seed: int) -> Parameters:
    """He-uniform weights, zero biases."""
    rng = RngStream.derive(seed, "init")
    params = Parameters()
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            bound = math.sqrt(6.0 / layer.in_features)
            params[i] = {
                "weight": rng.uniform(-bound, bound, (layer.in_features, layer.out_features)),
                "bias": np.zeros(layer.out_features),
            }
        elif layer.kind == "conv":
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            bound = math.sqrt(6.0 / fan_in)
            params[i] = {
                "weight": rng.uniform(-bound, bound, (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)),
                "bias": np.zeros(layer.out_channels),
            }
    return params


def _check_params(spec: NetworkSpec, params: Mapping) -> None:
    expected = init_params_shapes(spec)
    if sorted(expected) != sorted(int(k) for k in params):
        raise SpecError("parameter layers do not match spec")
    for i, shapes in expected.items():
        for name, shape in shapes.items():
            arr = params[i][name]
            got = arr.shape if not isinstance(arr, Tensor) else arr.shape
            if tuple(got) != shape:
                raise SpecError(f"layer {i} {name}: expected {shape}, got {tuple(got)}")


def init_params_shapes(spec: NetworkSpec) -> dict:
    out = {}
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            out[i] = {"weight": (layer.in_features, layer.out_features), "bias": (layer.out_features,)}
        elif layer.kind == "conv":
            out[i] = {"weight": (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel),
                      "bias": (layer.out_channels,)}
    return out


def _as_param(p) -> Tensor:
    return p if isinstance(p, Tensor) else Tensor(p)


def forward_layers(spec: NetworkSpec, params: Mapping, x: Tensor, mode: str = "deterministic",
                   rng=None, stop: Optional[int] = None) -> Tensor:
    """Run ``layers[:stop]`` on a batched input. Returns raw activations."""
    if mode not in ("deterministic", "mc-sample", "train"):
        raise ValueError(f"unknown mode {mode!r}")
    layers = spec.layers if stop is None else spec.layers[:stop]
    sites = set(spec.posthoc_sites) if spec.dropout_mode == "post-hoc" and mode == "mc-sample" else set()
    adhoc = spec.dropout_mode == "ad-hoc" and mode in ("mc-sample", "train")
    h = x
    for i, layer in enumerate(layers):
        k = layer.kind
        if k == "dense":
            p = params[i]
            h = ad.bias_add(ad.matmul(h, _as_param(p["weight"])), _as_param(p["bias"]))
        elif k == "conv":
            p = params[i]
            h = ad.conv2d(h, _as_param(p["weight"]), layer.stride, layer.padding)
            h = ad.bias_add(h, _as_param(p["bias"]), axis=1)
        elif k == "relu":
            h = ad.relu(h)
        elif k == "dropout":
            if adhoc and layer.rate > 0:
                h = ad.dropout_apply(h, layer.rate, rng)
        elif k == "flatten":
            h = ad.reshape(h, (h.shape[0], -1))
        elif k == "upsample":
            h = ad.upsample_nearest(h, layer.factor)
        if i in sites and spec.posthoc_rate > 0:
            h = ad.dropout_apply(h, spec.posthoc_rate, rng)
    return h


def _batched(spec: NetworkSpec, x) -> tuple:
    xt = x if isinstance(x, Tensor) else ad.constant(x)
    nd = len(spec.input_shape)
    if xt.shape == spec.input_shape:
        return ad.reshape(xt, (1,) + spec.input_shape), True
    if xt.data.ndim == nd + 1 and xt.shape[1:] == spec.input_shape:
        return xt, False
    raise SpecError(f"input shape {xt.shape} does not match {spec.input_shape}")


def logits(spec: NetworkSpec, params: Mapping, x, mode: str = "deterministic", rng=None) -> Tensor:
    """Pre-softmax outputs, class axis last (``N×L`` or ``N×H×W×L``)."""
    xb, single = _batched(spec, x)
    z = forward_layers(spec, params, xb, mode, rng)
    if spec.is_segmenter:
        z = ad.transpose(z, (0, 2, 3, 1))
    if single:
        z = ad.reshape(z, z.shape[1:])
    return z


def forward(spec: NetworkSpec, params: Mapping, x, mode: str = "deterministic", rng=None) -> Tensor:
    """Class probabilities for a single sample or a batch.

    ``mode='mc-sample'`` activates ad-hoc dropout layers or post-hoc
    injections with fresh masks drawn from ``rng``.
    """
    if mode == "mc-sample" and spec.stochastic and rng is None:
        raise ValueError("mc-sample mode needs an RngStream")
    return ad.softmax(logits(spec, params, x, mode, rng))


def features(spec: NetworkSpec, params: Mapping, x, mode: str = "deterministic", rng=None) -> Tensor:
    """Penultimate activations (input of the last parametrized layer), flattened per sample."""
    xb, single = _batched(spec, x)
    h = forward_layers(spec, params, xb, mode, rng, stop=spec.feature_layer)
    if h.data.ndim > 2:
        h = ad.reshape(h, (h.shape[0], -1))
    if single:
        h = ad.reshape(h, h.shape[1:])
    return h


def predict(spec: NetworkSpec, params: Mapping, x, batch_size: int = 512) -> np.ndarray:
    """Deterministic probabilities as a plain array, evaluated in batches."""
    x = np.asarray(x, dtype=np.float64)
    out = [forward(spec, params, x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    clip_norm: Optional[float] = None  # global gradient-norm cap

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("learning_rate, momentum and weight_decay must be non-negative (momentum < 1)")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")


@dataclass
class TrainResult:
    params: Parameters
    log: list = field(default_factory=list)
    final_train_accuracy: float = float("nan")


def cross_entropy(spec: NetworkSpec, params: Mapping, x, y, mode: str = "train", rng=None) -> Tensor:
    z = logits(spec, params, x, mode, rng)
    lp = ad.log_softmax(z)
    return ad.neg(ad.reduce("mean", ad.take(lp, y)))


def accuracy(spec: NetworkSpec, params: Mapping, x, y) -> float:
    pred = predict(spec, params, x).argmax(axis=-1)
    return float(np.mean(pred == np.asarray(y)))


def train(spec: NetworkSpec, inputs: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
          init: Optional[Parameters] = None) -> TrainResult:
    """Minibatch SGD with momentum on cross-entropy.

    Deterministic given ``cfg.seed`` and the dataset order. Post-hoc dropout is
    never active here.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= spec.num_classes):
        raise ValueError("labels outside [0, num_classes)")
    params = init.copy() if init is not None else init_params(spec, cfg.seed)
    velocity = {i: {k: np.zeros_like(v) for k, v in t.items()} for i, t in params.items()}
    order_rng = RngStream.derive(cfg.seed, "train-order")
    drop_rng = RngStream.derive(cfg.seed, "train-dropout")
    n = len(x)
    log = []
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        total_loss, total_correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            g = Graph()
            pvars = {i: {k: g.variable(v) for k, v in t.items()} for i, t in params.items()}
            try:
                z = logits(spec, pvars, x[idx], "train", drop_rng)
                loss = ad.neg(ad.reduce("mean", ad.take(ad.log_softmax(z), y[idx])))
            except ad.NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}: {exc}") from exc
            grads = ad.backward(g, loss)
            scale = 1.0
            if cfg.clip_norm is not None:
                norm = math.sqrt(sum(float(np.sum(grads[var.node_id] ** 2)) for t in pvars.values() for var in t.values()))
                if norm > cfg.clip_norm:
                    scale = cfg.clip_norm / norm
            for i, t in pvars.items():
                for k, var in t.items():
                    gr = scale * grads[var.node_id] + cfg.weight_decay * params[i][k]
                    v = velocity[i][k]
                    v *= cfg.momentum
                    v += gr
                    params[i][k] = params[i][k] - cfg.learning_rate * v
            total_loss += loss.item() * len(idx)
            pred = z.data.argmax(axis=-1)
            total_correct += int(np.sum(pred == y[idx]))
        denom = n if not spec.is_segmenter else y.size
        entry = {"epoch": epoch + 1, "loss": total_loss / n, "accuracy": total_correct / denom}
        if not math.isfinite(entry["loss"]):
            raise TrainingError(f"non-finite loss at epoch {epoch + 1}")
        log.append(entry)
        logger.debug("epoch %d loss %.4f acc %.4f", epoch + 1, entry["loss"], entry["accuracy"])
    params.freeze()
    final_acc = accuracy(spec, params, x, y)
    return TrainResult(params, log, final_acc)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(spec: NetworkSpec, params: Mapping, path, seed: Optional[int] = None,
                    train_log: Optional[Sequence[Mapping]] = None,
                    summary: Optional[Mapping] = None) -> None:
    """Write one JSON document: manifest plus nested parameter arrays.

    Floats are written with their shortest round-trip decimal repr, so the
    round trip is bit-exact.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "seed": seed,
        "train_log": list(train_log or []),
        "summary": dict(summary or {}),
        "params": {
            str(i): {k: {"shape": list(np.shape(v)), "values": np.asarray(v).tolist()} for k, v in sorted(t.items())}
            for i, t in sorted(params.items())
        },
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path, with_manifest: bool = False):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {doc.get('version')!r}")
    try:
        spec = NetworkSpec.from_dict(doc["spec"])
        params = Parameters()
        for i, t in doc["params"].items():
            params[int(i)] = {}
            for k, entry in t.items():
                arr = np.array(entry["values"], dtype=np.float64)
                if list(arr.shape) != list(entry["shape"]):
                    raise CheckpointError(f"{path}: layer {i} {k} payload does not match its shape")
                params[int(i)][k] = arr
        _check_params(spec, params)
    except (KeyError, TypeError, SpecError) as exc:
        raise CheckpointError(f"{path}: manifest mismatch ({exc})") from exc
    params.freeze()
    if with_manifest:
        manifest = {k: doc.get(k) for k in ("seed", "train_log", "summary")}
        return spec, params, manifest
    return spec, params
