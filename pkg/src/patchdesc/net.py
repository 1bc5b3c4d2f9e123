"""The fully convolutional patch descriptor network.

A 32x32 normalized single-channel patch goes through a stack of 3x3
convolutions (downsampling by stride 2, BN and ReLU after each conv, no ReLU
after the last one), a dropout layer just before the final 8x8 convolution,
and ends in an L2-normalized 128-D descriptor.  Model files use a small
binary format ("RALN") that round-trips bitwise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .ops import BatchNorm2d, Conv2d, Dropout, Flatten, ReLU, UnitNormRows

MODEL_MAGIC = b"RALN"
MODEL_VERSION = 1

_OP_CONV = 1
_OP_BNORM = 2
_OP_RELU = 3
_OP_DROPOUT = 4
_OP_FLATTEN = 5
_OP_UNITNORM = 6

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ModelFormatError(ValueError):
    """Raised for unreadable model files (magic, version, truncation)."""


@dataclass
class ConvSpec:
    kernel: int
    channels: int
    stride: int
    pad: int


def default_conv_stack() -> list[ConvSpec]:
    return [
        ConvSpec(3, 32, 1, 1),
        ConvSpec(3, 32, 1, 1),
        ConvSpec(3, 64, 2, 1),
        ConvSpec(3, 64, 1, 1),
        ConvSpec(3, 128, 2, 1),
        ConvSpec(3, 128, 1, 1),
        ConvSpec(8, 128, 1, 0),
    ]


@dataclass
class NetConfig:
    """Architecture description; the default stack maps 32x32 to a 128-D output."""

    convs: list[ConvSpec] = field(default_factory=default_conv_stack)
    dropout_rate: float = 0.3
    output_dim: int = 128
    input_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        if not self.convs:
            raise ValueError("need at least one conv layer")
        size = self.input_size
        for i, spec in enumerate(self.convs):
            if spec.stride not in (1, 2):
                raise ValueError(f"conv {i}: stride must be 1 or 2, got {spec.stride}")
            size = (size + 2 * spec.pad - spec.kernel) // spec.stride + 1
            if size < 1:
                raise ValueError(f"conv {i} shrinks the feature map below 1x1")
        if size != 1:
            raise ValueError(
                f"spatial arithmetic must end at 1x1, got {size}x{size} "
                f"for input {self.input_size}x{self.input_size}")
        if self.convs[-1].channels != self.output_dim:
            raise ValueError(
                f"last conv has {self.convs[-1].channels} channels, "
                f"expected output_dim={self.output_dim}")


class DescriptorNet:
    """Layer stack with forward/backward and the ParamBuffer set for SGD."""

    def __init__(self, layers: list, input_size: int, output_dim: int,
                 seed: int = 0):
        self.layers = layers
        self.input_size = input_size
        self.output_dim = output_dim
        self._rng = np.random.default_rng(seed)
        self._train_ready = False

    def params(self):
        return [l.weight for l in self.layers if isinstance(l, Conv2d)]

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params())

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def forward(self, patches: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        if patches.ndim != 4 or patches.shape[1] != 1 \
                or patches.shape[2] != self.input_size or patches.shape[3] != self.input_size:
            raise ValueError(
                f"expected patches (N,1,{self.input_size},{self.input_size}), "
                f"got {patches.shape}")
        if rng is None:
            rng = self._rng
        x = patches
        for layer in self.layers:
            if isinstance(layer, Dropout):
                x = layer.forward(x, train=train, rng=rng)
            else:
                x = layer.forward(x, train=train)
        self._train_ready = train
        return x

    def backward(self, grad_descriptors: np.ndarray) -> np.ndarray:
        if not self._train_ready:
            raise RuntimeError("backward requires a preceding train-mode forward")
        g = grad_descriptors
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def relu_input_signs(self) -> list[np.ndarray]:
        """Signs of cached ReLU pre-activations (train mode only); for kink checks."""
        return [np.sign(l.last_input) for l in self.layers
                if isinstance(l, ReLU) and l.last_input is not None]


def build_net(config: NetConfig, dtype=np.float32) -> DescriptorNet:
    """Assemble the network; weights are reproducible from config.seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    layers: list = []
    in_ch = 1
    last = len(config.convs) - 1
    for i, spec in enumerate(config.convs):
        if i == last and config.dropout_rate > 0:
            layers.append(Dropout(config.dropout_rate))
        layers.append(Conv2d(in_ch, spec.channels, spec.kernel, spec.stride,
                             spec.pad, rng, dtype=dtype, name=f"conv{i}"))
        layers.append(BatchNorm2d(spec.channels, eps=BN_EPS, momentum=BN_MOMENTUM,
                                  dtype=dtype))
        if i != last:
            layers.append(ReLU())
        in_ch = spec.channels
    layers.append(Flatten())
    layers.append(UnitNormRows())
    return DescriptorNet(layers, config.input_size, config.output_dim,
                         seed=config.seed)


# ---------------------------------------------------------------------------
# model file I/O
#
# Layout (little-endian): magic "RALN", u32 version, u32 input_size,
# u32 entry count, then one table entry per layer (u32 op code, u32 ndim,
# ndim x u32 dims), then the float32 payloads in table order.  Conv entries
# carry (out,in,kh,kw,stride,pad) as their dims and the raw weights as
# payload; BN entries carry (channels,) and running mean then running var;
# dropout carries its rate as a single float payload.


def save_model(net: DescriptorNet, path: str) -> None:
    entries = []
    payloads = []
    for layer in net.layers:
        if isinstance(layer, Conv2d):
            w = layer.weight.value
            dims = list(w.shape) + [layer.stride, layer.pad]
            entries.append((_OP_CONV, dims))
            payloads.append(np.ascontiguousarray(w, dtype="<f4"))
        elif isinstance(layer, BatchNorm2d):
            entries.append((_OP_BNORM, [layer.channels]))
            payloads.append(np.concatenate([layer.running_mean, layer.running_var])
                            .astype("<f4"))
        elif isinstance(layer, ReLU):
            entries.append((_OP_RELU, []))
        elif isinstance(layer, Dropout):
            entries.append((_OP_DROPOUT, []))
            payloads.append(np.array([layer.rate], dtype="<f4"))
        elif isinstance(layer, Flatten):
            entries.append((_OP_FLATTEN, []))
        elif isinstance(layer, UnitNormRows):
            entries.append((_OP_UNITNORM, []))
        else:
            raise ModelFormatError(f"cannot serialize layer {type(layer).__name__}")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<II", MODEL_VERSION, net.input_size))
        f.write(struct.pack("<I", len(entries)))
        for op, dims in entries:
            f.write(struct.pack("<II", op, len(dims)))
            f.write(struct.pack(f"<{len(dims)}I", *dims))
        for arr in payloads:
            f.write(arr.tobytes())


def load_model(path: str) -> DescriptorNet:
    with open(path, "rb") as f:
        blob = f.read()

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ModelFormatError(f"truncated model file: ran out reading {what}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    off = 0
    if take(4, "magic") != MODEL_MAGIC:
        raise ModelFormatError("bad magic: not a descriptor model file")
    version, input_size = struct.unpack("<II", take(8, "header"))
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    (n_entries,) = struct.unpack("<I", take(4, "entry count"))
    table = []
    for i in range(n_entries):
        op, ndim = struct.unpack("<II", take(8, f"entry {i}"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"entry {i} dims"))
        table.append((op, dims))

    rng = np.random.default_rng(0)
    layers: list = []
    out_dim = None
    for i, (op, dims) in enumerate(table):
        if op == _OP_CONV:
            if len(dims) != 6:
                raise ModelFormatError(f"conv entry {i} needs 6 dims, got {len(dims)}")
            fo, fi, kh, kw, stride, pad = dims
            if kh != kw:
                raise ModelFormatError(f"conv entry {i}: non-square kernel {kh}x{kw}")
            raw = take(4 * fo * fi * kh * kw, f"conv {i} weights")
            layer = Conv2d(fi, fo, kh, stride, pad, rng, dtype=np.float32,
                           name=f"conv{i}")
            layer.weight.value = np.frombuffer(raw, dtype="<f4").reshape(fo, fi, kh, kw).copy()
            layer.weight.grad = np.zeros_like(layer.weight.value)
            layer.weight.velocity = np.zeros_like(layer.weight.value)
            layers.append(layer)
            out_dim = fo
        elif op == _OP_BNORM:
            (c,) = dims
            raw = take(4 * 2 * c, f"batch_norm {i} statistics")
            stats = np.frombuffer(raw, dtype="<f4")
            layer = BatchNorm2d(c, eps=BN_EPS, momentum=BN_MOMENTUM, dtype=np.float32)
            layer.running_mean = stats[:c].copy()
            layer.running_var = stats[c:].copy()
            layers.append(layer)
        elif op == _OP_RELU:
            layers.append(ReLU())
        elif op == _OP_DROPOUT:
            raw = take(4, f"dropout {i} rate")
            (rate,) = struct.unpack("<f", raw)
            layers.append(Dropout(float(rate)))
        elif op == _OP_FLATTEN:
            layers.append(Flatten())
        elif op == _OP_UNITNORM:
            layers.append(UnitNormRows())
        else:
            raise ModelFormatError(f"unknown op code {op} in entry {i}")
    if off != len(blob):
        raise ModelFormatError(f"{len(blob) - off} trailing bytes after payloads")
    if out_dim is None:
        raise ModelFormatError("model file contains no conv layers")
    return DescriptorNet(layers, int(input_size), int(out_dim))


def describe_patches(net: DescriptorNet, patches: np.ndarray,
                     batch: int = 256) -> np.ndarray:
    """Eval-mode descriptors for (K,S,S) patches, computed in chunks."""
    chunks = []
    for start in range(0, len(patches), batch):
        block = patches[start:start + batch]
        chunks.append(net.forward(block[:, None, :, :].astype(np.float32)))
    return np.concatenate(chunks, axis=0)
