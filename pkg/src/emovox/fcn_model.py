"""The three-layer fully convolutional classifier.

conv(64, 7x11) + ReLU -> conv(64, 11x7) + ReLU -> conv(C, 1x1) ->
dropout -> global average pooling -> softmax.  Valid padding and stride 1
throughout, so any input of at least 17x17 produces a length-C output.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn
from .dsp import FeatureMap
from .errors import (BadMagic, ChecksumMismatch, InputBelowMinimum, ShapeMismatch,
                     TruncatedPayload, UnsupportedVersion)


@dataclass(frozen=True)
class FcnConfig:
    n_classes: int
    conv1_filters: int = 64
    conv1_kernel: tuple[int, int] = (7, 11)
    conv2_filters: int = 64
    conv2_kernel: tuple[int, int] = (11, 7)
    dropout_rate: float = 0.5
    input_channels: int = 1

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if min(*self.conv1_kernel, *self.conv2_kernel) < 1:
            raise ValueError("kernel extents must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass
class FcnModel:
    config: FcnConfig
    params: dict[str, np.ndarray]
    class_names: list[str]
    optimizer_state: dict[str, nn.AdamState] | None = None

    def __post_init__(self):
        if len(self.class_names) != self.config.n_classes:
            raise ValueError("class_names length must equal n_classes")

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray
    label: str
    argmax_index: int


PARAM_ORDER = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b")


def param_shapes(config: FcnConfig) -> dict[str, tuple]:
    k1h, k1w = config.conv1_kernel
    k2h, k2w = config.conv2_kernel
    c = config.n_classes
    return {
        "conv1.w": (k1h, k1w, config.input_channels, config.conv1_filters),
        "conv1.b": (config.conv1_filters,),
        "conv2.w": (k2h, k2w, config.conv1_filters, config.conv2_filters),
        "conv2.b": (config.conv2_filters,),
        "conv3.w": (1, 1, config.conv2_filters, c),
        "conv3.b": (c,),
    }


def build_fcn(config: FcnConfig, class_names, rng: nn.Rng,
              dtype=np.float32) -> FcnModel:
    """Glorot-initialized weights, zero biases."""
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".w"):
            kh, kw, cin, cout = shape
            params[name] = nn.glorot_uniform_init(shape, kh * kw * cin, kh * kw * cout,
                                                  rng, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return FcnModel(config=config, params=params, class_names=list(class_names))


def min_input_shape(config: FcnConfig) -> tuple[int, int]:
    """Smallest (H, W) the stacked valid convolutions accept."""
    h = (config.conv1_kernel[0] - 1) + (config.conv2_kernel[0] - 1) + 1
    w = (config.conv1_kernel[1] - 1) + (config.conv2_kernel[1] - 1) + 1
    return h, w


def _shrink(config: FcnConfig) -> tuple[int, int]:
    mh, mw = min_input_shape(config)
    return mh - 1, mw - 1


def forward(model: FcnModel, batch: np.ndarray, valid_extents=None,
            training: bool = False, rng: nn.Rng | None = None):
    """Run the network; returns (probs (N, C), cache for backward).

    ``valid_extents`` marks each padded sample's true (h, w) so pooling
    ignores the zero padding.
    """
    mh, mw = min_input_shape(model.config)
    if batch.ndim != 4 or batch.shape[3] != model.config.input_channels:
        raise ShapeMismatch(f"batch shape {batch.shape} not (N,H,W,{model.config.input_channels})")
    if batch.shape[1] < mh or batch.shape[2] < mw:
        raise InputBelowMinimum(f"input {batch.shape[1:3]} below minimum {(mh, mw)}")
    if valid_extents is not None:
        for hw in valid_extents:
            if hw[0] < mh or hw[1] < mw:
                raise InputBelowMinimum(f"extent {tuple(hw)} below minimum {(mh, mw)}")
    if training and model.config.dropout_rate > 0 and rng is None:
        raise ValueError("training-mode forward needs an rng for dropout")

    p = model.params
    x = batch.astype(p["conv1.w"].dtype, copy=False)
    z1 = nn.conv2d_forward(x, p["conv1.w"], p["conv1.b"])
    a1 = nn.relu(z1)
    z2 = nn.conv2d_forward(a1, p["conv2.w"], p["conv2.b"])
    a2 = nn.relu(z2)
    z3 = nn.conv2d_forward(a2, p["conv3.w"], p["conv3.b"])
    d3, mask = nn.dropout(z3, model.config.dropout_rate, rng, training)

    sh, sw = _shrink(model.config)
    gap_extents = None
    if valid_extents is not None:
        gap_extents = [(hw[0] - sh, hw[1] - sw) for hw in valid_extents]
    logits = nn.global_average_pool(d3, gap_extents)

    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)

    cache = {"x": x, "z1": z1, "a1": a1, "z2": z2, "a2": a2, "z3": z3,
             "mask": mask, "gap_extents": gap_extents, "logits": logits}
    return probs, cache


def backward(model: FcnModel, grad_logits: np.ndarray, cache) -> dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(logits)."""
    p = model.params
    d3_shape = cache["z3"].shape
    g = nn.global_average_pool_backward(grad_logits, d3_shape, cache["gap_extents"])
    g = nn.dropout_backward(g, cache["mask"])
    g, gw3, gb3 = nn.conv2d_backward(g, cache["a2"], p["conv3.w"])
    g = nn.relu_backward(g, cache["z2"])
    g, gw2, gb2 = nn.conv2d_backward(g, cache["a1"], p["conv2.w"])
    g = nn.relu_backward(g, cache["z1"])
    _, gw1, gb1 = nn.conv2d_backward(g, cache["x"], p["conv1.w"], need_input_grad=False)
    return {"conv1.w": gw1, "conv1.b": gb1, "conv2.w": gw2, "conv2.b": gb2,
            "conv3.w": gw3, "conv3.b": gb3}


def predict(model: FcnModel, features: FeatureMap) -> Prediction:
    """Inference on one whole feature map; ties break to the lowest index."""
    batch = features.values.astype(model.params["conv1.w"].dtype)[None, :, :, None]
    probs, _ = forward(model, batch, training=False)
    row = probs[0]
    idx = int(np.argmax(row))  # argmax returns the first maximal index
    return Prediction(probs=row, label=model.class_names[idx], argmax_index=idx)


# --- persistence ----------------------------------------------------------

_MAGIC = b"FCNA"
_VERSION = 1


def _config_to_json(config: FcnConfig) -> dict:
    return {
        "n_classes": config.n_classes,
        "conv1_filters": config.conv1_filters,
        "conv1_kernel": list(config.conv1_kernel),
        "conv2_filters": config.conv2_filters,
        "conv2_kernel": list(config.conv2_kernel),
        "dropout_rate": config.dropout_rate,
        "input_channels": config.input_channels,
    }


def _config_from_json(d: dict) -> FcnConfig:
    return FcnConfig(n_classes=d["n_classes"], conv1_filters=d["conv1_filters"],
                     conv1_kernel=tuple(d["conv1_kernel"]), conv2_filters=d["conv2_filters"],
                     conv2_kernel=tuple(d["conv2_kernel"]), dropout_rate=d["dropout_rate"],
                     input_channels=d["input_channels"])


def save_model(model: FcnModel, path) -> None:
    """FCNA container: magic, version, JSON header with a tensor manifest,
    float32 LE payload, CRC32 trailer."""
    tensors: list[tuple[str, np.ndarray]] = [(k, model.params[k]) for k in PARAM_ORDER]
    opt_meta = None
    if model.optimizer_state:
        opt_meta = {}
        for k in PARAM_ORDER:
            st = model.optimizer_state[k]
            tensors.append((f"adam.{k}.m", st.m))
            tensors.append((f"adam.{k}.v", st.v))
            opt_meta[k] = {"t": st.t, "lr": st.lr, "beta1": st.beta1,
                           "beta2": st.beta2, "eps": st.eps}

    manifest = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)

    header = json.dumps({
        "config": _config_to_json(model.config),
        "class_names": model.class_names,
        "tensors": manifest,
        "optimizer": opt_meta,
    }).encode("utf-8")
    payload = b"".join(blobs)

    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_model(path) -> FcnModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != _MAGIC:
        raise BadMagic("not an FCNA model file")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise UnsupportedVersion(f"model format version {version} not supported")
    if len(data) < 12 + hlen + 4:
        raise TruncatedPayload("model file shorter than its header claims")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    payload = data[12 + hlen:-4]
    (crc_stored,) = struct.unpack("<I", data[-4:])

    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(payload):
            raise TruncatedPayload(f"tensor {entry['name']} extends past payload")
        tensors[entry["name"]] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()

    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ChecksumMismatch("payload CRC32 mismatch")

    config = _config_from_json(header["config"])
    params = {k: tensors[k] for k in PARAM_ORDER}
    opt = None
    if header.get("optimizer"):
        opt = {}
        for k, meta in header["optimizer"].items():
            opt[k] = nn.AdamState(m=tensors[f"adam.{k}.m"], v=tensors[f"adam.{k}.v"],
                                  t=meta["t"], lr=meta["lr"], beta1=meta["beta1"],
                                  beta2=meta["beta2"], eps=meta["eps"])
    return FcnModel(config=config, params=params,
                    class_names=list(header["class_names"]), optimizer_state=opt)
