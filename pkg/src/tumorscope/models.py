"""Declarative layer stacks, the three architecture builders, and checkpoints.

A :class:`ModelSpec` is an ordered list of :class:`LayerSpec`. Shapes are
inferred and checked at construction, so a built model is always consistent.
Per-sample shapes exclude the batch axis.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tumorscope import tensorcore as tc
from tumorscope.tensorcore import RngState, ShapeError

KINDS = ("conv", "maxpool", "gap", "dense", "relu", "batchnorm", "dropout", "flatten")
TRAINABLE_PARAMS = {"conv": ("kernel", "bias"), "dense": ("weight", "bias"), "batchnorm": ("gamma", "beta")}
BUFFERS = {"batchnorm": ("running_mean", "running_var")}


class ModelError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str
    hyper: dict = field(default_factory=dict)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown layer kind {self.kind!r}")

    @property
    def is_softmax_head(self) -> bool:
        return self.kind == "dense" and bool(self.hyper.get("softmax", False))

    def param_names(self) -> tuple[str, ...]:
        return TRAINABLE_PARAMS.get(self.kind, ()) + BUFFERS.get(self.kind, ())


def layer_output_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    k, h = layer.kind, layer.hyper
    if k == "conv":
        if len(shape) != 3:
            raise ShapeError("conv", ("H", "W", "C"), shape)
        oh, ow = tc.conv_output_hw(shape[0], shape[1], h["kh"], h["kw"], h["padding"])
        if oh < 1 or ow < 1:
            raise ShapeError("conv", (h["kh"], h["kw"]), shape[:2])
        return (oh, ow, h["filters"])
    if k == "maxpool":
        p = h.get("size", 2)
        if len(shape) != 3 or shape[0] < p or shape[1] < p:
            raise ShapeError("maxpool", (p, p, "C"), shape)
        return (shape[0] // p, shape[1] // p, shape[2])
    if k == "gap":
        if len(shape) != 3:
            raise ShapeError("gap", ("H", "W", "C"), shape)
        return (shape[2],)
    if k == "flatten":
        return (int(np.prod(shape)),)
    if k == "dense":
        if len(shape) != 1:
            raise ShapeError("dense", ("n",), shape)
        return (h["units"],)
    return tuple(shape)


def layer_param_shapes(layer: LayerSpec, shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    k, h = layer.kind, layer.hyper
    if k == "conv":
        return {"kernel": (h["kh"], h["kw"], shape[-1], h["filters"]), "bias": (h["filters"],)}
    if k == "dense":
        return {"weight": (shape[0], h["units"]), "bias": (h["units"],)}
    if k == "batchnorm":
        c = (shape[-1],)
        return {"gamma": c, "beta": c, "running_mean": c, "running_var": c}
    return {}


@dataclass
class ModelSpec:
    name: str
    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    class_count: int | None = None
    meta: dict = field(default_factory=dict)
    shapes: list[tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.validate()

    def validate(self) -> None:
        shape = self.input_shape
        if any(d < 1 for d in shape):
            raise ShapeError(f"{self.name} input", ("positive",), shape)
        shapes = [shape]
        for i, layer in enumerate(self.layers):
            try:
                expected = layer_param_shapes(layer, shape)
                shape = layer_output_shape(layer, shape)
            except ShapeError as err:
                raise ModelError(f"layer {i} ({layer.kind}): {err}") from err
            if set(layer.params) != set(expected):
                raise ModelError(f"layer {i} ({layer.kind}): parameters {sorted(layer.params)} "
                                 f"but expected {sorted(expected)}")
            for pname, pshape in expected.items():
                if layer.params[pname].shape != pshape:
                    raise ModelError(f"layer {i} ({layer.kind}) {pname}: shape {layer.params[pname].shape} "
                                     f"but expected {pshape}")
            shapes.append(shape)
        self.shapes = shapes
        heads = [i for i, layer in enumerate(self.layers) if layer.is_softmax_head]
        if self.class_count is None:
            if heads:
                raise ModelError("feature extractor must not contain a softmax head")
            return
        if heads != [len(self.layers) - 1]:
            raise ModelError("model must end in exactly one softmax dense layer")
        if self.layers[-1].hyper["units"] != self.class_count:
            raise ModelError(f"softmax head has {self.layers[-1].hyper['units']} units, "
                             f"expected {self.class_count}")

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def layer_name(self, i: int) -> str:
        return f"{i:02d}_{self.layers[i].kind}"

    def named_params(self, trainable_only: bool = False):
        """Yield ``(full_name, layer_index, param_name, array)`` in layer order."""
        for i, layer in enumerate(self.layers):
            names = TRAINABLE_PARAMS.get(layer.kind, ()) if trainable_only else layer.param_names()
            if trainable_only and not layer.trainable:
                continue
            for pname in names:
                yield f"{self.layer_name(i)}.{pname}", i, pname, layer.params[pname]

    def parameter_count(self, trainable_only: bool = True) -> int:
        return sum(a.size for *_, a in self.named_params(trainable_only))

    def copy(self) -> ModelSpec:
        return copy.deepcopy(self)


# ------------------------------------------------------------------ builders

def conv(filters, k=3, padding="same", l2=0.0, init="he"):
    return LayerSpec("conv", {"kh": k, "kw": k, "filters": filters, "padding": padding, "l2": l2, "init": init})


def dense(units, softmax=False, init="he"):
    return LayerSpec("dense", {"units": units, "softmax": softmax, "init": "lecun" if softmax else init})


def maxpool(size=2):
    return LayerSpec("maxpool", {"size": size})


def batchnorm(eps=1e-5, momentum=0.9):
    return LayerSpec("batchnorm", {"eps": eps, "momentum": momentum})


def dropout(rate):
    return LayerSpec("dropout", {"rate": rate})


def relu():
    return LayerSpec("relu")


def flatten():
    return LayerSpec("flatten")


def gap():
    return LayerSpec("gap")


def _init_params(layer: LayerSpec, shape, rng: RngState, dtype) -> None:
    shapes = layer_param_shapes(layer, shape)
    if layer.kind in ("conv", "dense"):
        wname = "kernel" if layer.kind == "conv" else "weight"
        wshape = shapes[wname]
        fan_in = int(np.prod(wshape[:-1]))
        # He-uniform for relu-followed layers, LeCun-uniform otherwise
        limit = np.sqrt((6.0 if layer.hyper.get("init") == "he" else 3.0) / fan_in)
        layer.params = {wname: rng.generator().uniform(-limit, limit, size=wshape).astype(dtype),
                        "bias": np.zeros(shapes["bias"], dtype=dtype)}
    elif layer.kind == "batchnorm":
        c = shapes["gamma"]
        layer.params = {"gamma": np.ones(c, dtype), "beta": np.zeros(c, dtype),
                        "running_mean": np.zeros(c, dtype), "running_var": np.ones(c, dtype)}


def assemble(name: str, input_shape, layers: list[LayerSpec], class_count: int | None,
             rng: RngState, dtype=np.float32) -> ModelSpec:
    """Initialise parameters for ``layers`` (seeded per layer) and validate the stack."""
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        try:
            _init_params(layer, shape, rng.split(i), dtype)
            shape = layer_output_shape(layer, shape)
        except ShapeError as err:
            raise ModelError(f"layer {i} ({layer.kind}): {err}") from err
    return ModelSpec(name, tuple(input_shape), layers, class_count)


def build_cnn3(input_shape=(270, 270, 1), classes: int = 3, rng: RngState = RngState(0),
               l2: float = 1e-4) -> ModelSpec:
    """Three conv blocks (16, 32, 64 filters) and two 16-unit dense layers."""
    if classes < 2:
        raise ModelError("need at least two classes")
    layers = [
        conv(16), relu(), maxpool(), dropout(0.5), batchnorm(),
        conv(32, l2=l2), relu(), maxpool(),
        conv(64, l2=l2), relu(), maxpool(),
        flatten(),
        dense(16), batchnorm(), relu(),
        dense(16), batchnorm(), relu(),
        dense(classes, softmax=True),
    ]
    return assemble("cnn3", input_shape, layers, classes, rng)


def build_unet_classifier(input_shape=(270, 270, 1), classes: int = 3, rng: RngState = RngState(0),
                          base_filters: int = 64) -> ModelSpec:
    """U-Net encoder (four double-conv blocks + bottleneck) with a GAP classifier.

    ``base_filters`` = 64 gives the 64/128/256/512 encoder and 1024-filter
    bottleneck; smaller values scale every width proportionally.
    """
    if classes < 2:
        raise ModelError("need at least two classes")
    layers: list[LayerSpec] = []
    for mult in (1, 2, 4, 8):
        layers += [conv(base_filters * mult), relu(), conv(base_filters * mult), relu(), maxpool()]
    layers += [conv(base_filters * 16), relu(), conv(base_filters * 16), relu(),
               gap(), dropout(0.5), dense(classes, softmax=True)]
    return assemble("unet_classifier", input_shape, layers, classes, rng)


def make_toy_backbone(input_shape=(64, 64, 1), rng: RngState = RngState(0),
                      filters: tuple[int, ...] = (8, 16)) -> ModelSpec:
    """Small seeded conv stack standing in for a pretrained feature extractor."""
    layers: list[LayerSpec] = []
    for f in filters:
        layers += [conv(f), relu(), maxpool()]
    return assemble("toy_backbone", input_shape, layers, None, rng)


def build_tl_head(backbone: ModelSpec, classes: int = 3, dropout_rate: float = 0.2,
                  rng: RngState = RngState(0)) -> ModelSpec:
    """Freeze ``backbone`` and append flatten → batchnorm → dropout → softmax dense."""
    if not backbone.layers:
        raise ModelError("backbone has no layers")
    if backbone.class_count is not None:
        raise ModelError("backbone must end in a feature tensor, not a classifier")
    frozen = copy.deepcopy(backbone.layers)
    for layer in frozen:
        layer.trainable = False
    head = [flatten(), batchnorm(), dropout(dropout_rate), dense(classes, softmax=True)]
    shape = backbone.output_shape
    for i, layer in enumerate(head):
        _init_params(layer, shape, rng.split(len(frozen) + i), np.float32)
        shape = layer_output_shape(layer, shape)
    return ModelSpec(f"tlhead[{backbone.name}]", backbone.input_shape, frozen + head, classes)


# ------------------------------------------------------------------ execution

@dataclass
class ForwardTrace:
    caches: list
    running_updates: dict[int, tuple[np.ndarray, np.ndarray]]


def _check_batch(model: ModelSpec, batch: np.ndarray) -> np.ndarray:
    if batch.ndim != len(model.input_shape) + 1 or batch.shape[1:] != model.input_shape:
        raise ModelError(f"layer 0 ({model.layers[0].kind if model.layers else 'input'}): "
                         f"batch shape {batch.shape} does not match model input (B,)+{model.input_shape}")
    return batch


def forward_logits(model: ModelSpec, batch: np.ndarray, mode: str = "infer",
                   rng: RngState | None = None, trace: bool = False):
    """Run every layer; the softmax head returns its pre-activation logits.

    Frozen layers always run in inference mode. With ``trace=True`` returns
    ``(logits, ForwardTrace)`` for :func:`backward`.
    """
    x = _check_batch(model, batch)
    caches: list = []
    updates: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for i, layer in enumerate(model.layers):
        lmode = mode if layer.trainable else "infer"
        p, h = layer.params, layer.hyper
        try:
            if layer.kind == "conv":
                cache, x = x, tc.conv2d(x, p["kernel"], p["bias"], h["padding"])
            elif layer.kind == "relu":
                cache, x = x, tc.relu(x)
            elif layer.kind == "maxpool":
                shape = x.shape
                x, arg = tc.maxpool2d(x, h.get("size", 2))
                cache = (shape, arg)
            elif layer.kind == "gap":
                cache, x = x.shape, tc.global_average_pool(x)
            elif layer.kind == "flatten":
                cache, x = x.shape, x.reshape(x.shape[0], -1)
            elif layer.kind == "dense":
                cache, x = x, tc.dense(x, p["weight"], p["bias"])
            elif layer.kind == "batchnorm":
                x, cache, rm, rv = tc.batchnorm(x, p["gamma"], p["beta"], p["running_mean"], p["running_var"],
                                                lmode, h["eps"], h["momentum"])
                if lmode == "train":
                    updates[i] = (rm, rv)
            elif layer.kind == "dropout":
                if lmode == "train" and h["rate"] > 0:
                    if rng is None:
                        raise ModelError("train-mode forward needs an RngState for dropout")
                    cache = tc.dropout_mask(x.shape, h["rate"], rng.split(i), x.dtype.type)
                    x = x * cache
                else:
                    cache = None
        except ShapeError as err:
            raise ModelError(f"layer {i} ({layer.kind}): {err}") from err
        if trace:
            caches.append(cache)
    if trace:
        return x, ForwardTrace(caches, updates)
    return x


def forward(model: ModelSpec, batch: np.ndarray, mode: str = "infer", rng: RngState | None = None) -> np.ndarray:
    """Class probabilities ``[B, classes]``."""
    if model.class_count is None:
        raise ModelError("forward() needs a classifier; use features() for a backbone")
    return tc.softmax(forward_logits(model, batch, mode, rng))


def predict_proba(model: ModelSpec, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode probabilities, evaluated in chunks of ``batch_size``."""
    x = np.asarray(x, dtype=np.float32)
    return np.concatenate([forward(model, x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def features(model: ModelSpec, batch: np.ndarray) -> np.ndarray:
    return forward_logits(model, batch, "infer")


def first_trainable_layer(model: ModelSpec) -> int:
    for i, layer in enumerate(model.layers):
        if layer.trainable and layer.kind in TRAINABLE_PARAMS:
            return i
    return len(model.layers)


def backward(model: ModelSpec, tr: ForwardTrace, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every trainable parameter, keyed by full parameter name.

    Propagation stops below the first trainable layer, so frozen backbones
    cost nothing on the backward pass.
    """
    grads: dict[str, np.ndarray] = {}
    g = grad_logits
    stop = first_trainable_layer(model)
    for i in range(len(model.layers) - 1, stop - 1, -1):
        layer, cache = model.layers[i], tr.caches[i]
        p = layer.params
        if layer.kind == "conv":
            lg = tc.conv2d_backward(cache, p["kernel"], g, layer.hyper["padding"])
        elif layer.kind == "dense":
            lg = tc.dense_backward(cache, p["weight"], g)
        elif layer.kind == "batchnorm":
            lg = tc.batchnorm_backward(cache, p["gamma"], g)
        else:
            lg = None
            if layer.kind == "relu":
                g = tc.relu_backward(cache, g)
            elif layer.kind == "maxpool":
                g = tc.maxpool2d_backward(g, cache[1], cache[0], layer.hyper.get("size", 2))
            elif layer.kind == "gap":
                g = tc.global_average_pool_backward(g, cache)
            elif layer.kind == "flatten":
                g = g.reshape(cache)
            elif layer.kind == "dropout" and cache is not None:
                g = g * cache
        if lg is not None:
            if layer.trainable:
                for pname, pg in lg.param_grads.items():
                    grads[f"{model.layer_name(i)}.{pname}"] = pg
            g = lg.input_grad
    return grads


def apply_running_updates(model: ModelSpec, tr: ForwardTrace) -> None:
    for i, (rm, rv) in tr.running_updates.items():
        model.layers[i].params["running_mean"] = rm
        model.layers[i].params["running_var"] = rv


# ------------------------------------------------------------------ checkpoints

MAGIC = b"TBCK"
VERSION = 1
KIND_TAGS = {k: i + 1 for i, k in enumerate(KINDS)}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
PADDING_CODES = {"same": 0, "valid": 1}


class CheckpointError(ValueError):
    code = "malformed"


class BadMagicError(CheckpointError):
    code = "bad_magic"


class VersionMismatchError(CheckpointError):
    code = "version_mismatch"


class TruncatedError(CheckpointError):
    code = "truncated"


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_hyper(layer: LayerSpec) -> bytes:
    h = layer.hyper
    out = struct.pack("<B", 1 if layer.trainable else 0)
    if layer.kind == "conv":
        out += struct.pack("<IIIBd", h["kh"], h["kw"], h["filters"], PADDING_CODES[h["padding"]], h["l2"])
    elif layer.kind == "maxpool":
        out += struct.pack("<I", h.get("size", 2))
    elif layer.kind == "dense":
        out += struct.pack("<IB", h["units"], 1 if h["softmax"] else 0)
    elif layer.kind == "batchnorm":
        out += struct.pack("<dd", h["eps"], h["momentum"])
    elif layer.kind == "dropout":
        out += struct.pack("<d", h["rate"])
    return out


def checkpoint_bytes(model: ModelSpec) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(model.name), struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<B", KIND_TAGS[layer.kind]))
        parts.append(_pack_hyper(layer))
        names = layer.param_names()
        parts.append(struct.pack("<I", len(names)))
        for pname in names:
            arr = layer.params[pname]
            parts.append(_pack_str(pname))
            parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = dict(model.meta)
    meta["input_shape"] = list(model.input_shape)
    meta["class_count"] = model.class_count
    parts.append(_pack_str(json.dumps(meta, sort_keys=True)))
    return b"".join(parts)


def save_checkpoint(model: ModelSpec, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<I", what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as err:
            raise CheckpointError(f"invalid UTF-8 in {what}") from err


def _read_hyper(r: _Reader, kind: str) -> tuple[dict, bool]:
    (trainable,) = r.unpack("<B", "trainable flag")
    if kind == "conv":
        kh, kw, filters, pad, l2 = r.unpack("<IIIBd", "conv hyperparameters")
        padding = {v: k for k, v in PADDING_CODES.items()}.get(pad)
        if padding is None:
            raise CheckpointError(f"unknown padding code {pad}")
        return {"kh": kh, "kw": kw, "filters": filters, "padding": padding, "l2": l2}, bool(trainable)
    if kind == "maxpool":
        return {"size": r.unpack("<I", "pool size")[0]}, bool(trainable)
    if kind == "dense":
        units, sm = r.unpack("<IB", "dense hyperparameters")
        return {"units": units, "softmax": bool(sm)}, bool(trainable)
    if kind == "batchnorm":
        eps, mom = r.unpack("<dd", "batchnorm hyperparameters")
        return {"eps": eps, "momentum": mom}, bool(trainable)
    if kind == "dropout":
        return {"rate": r.unpack("<d", "dropout rate")[0]}, bool(trainable)
    return {}, bool(trainable)


def checkpoint_from_bytes(data: bytes) -> ModelSpec:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError("not a checkpoint: bad magic bytes")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    name = r.string("model name")
    (n_layers,) = r.unpack("<I", "layer count")
    layers = []
    for _ in range(n_layers):
        (tag,) = r.unpack("<B", "kind tag")
        kind = TAG_KINDS.get(tag)
        if kind is None:
            raise CheckpointError(f"unknown layer kind tag {tag}")
        hyper, trainable = _read_hyper(r, kind)
        (n_params,) = r.unpack("<I", "parameter count")
        params = {}
        for _ in range(n_params):
            pname = r.string("parameter name")
            (rank,) = r.unpack("<B", f"{pname} rank")
            dims = r.unpack(f"<{rank}I", f"{pname} dims")
            count = int(np.prod(dims)) if rank else 1
            raw = r.take(4 * count, f"tensor {pname}")
            params[pname] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
        layers.append(LayerSpec(kind, hyper, params, trainable))
    try:
        meta = json.loads(r.string("metadata"))
    except json.JSONDecodeError as err:
        raise CheckpointError("metadata block is not valid JSON") from err
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after metadata")
    input_shape = tuple(meta.pop("input_shape"))
    class_count = meta.pop("class_count")
    try:
        return ModelSpec(name, input_shape, layers, class_count, meta)
    except (ModelError, ShapeError) as err:
        raise CheckpointError(f"inconsistent model: {err}") from err


def load_checkpoint(path) -> ModelSpec:
    return checkpoint_from_bytes(Path(path).read_bytes())
