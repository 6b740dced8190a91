"""Network architecture description, parameter state, and forward passes.

The convolutional tower follows a VGG-like layout: five valid 3x3
convolutions with {16, 16, 32, 32, 64} kernels, ELU activations, 2x2 max
pooling interleaved, then two fully connected layers of 512 and a softmax
over {normal, malignant}.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class SpecError(Exception):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | maxpool | dense | elu | dropout | softmax | sigmoid
    kernel_count: int = 0
    kernel_size: int = 0
    stride: int = 1
    units: int = 0
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.kind == "conv":
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise SpecError("conv kernel_size must be odd and >= 1")
        if self.stride < 1:
            raise SpecError("stride must be >= 1")
        if self.kind == "dense" and self.units < 1:
            raise SpecError("dense units must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise SpecError("dropout_rate must be in [0,1)")


DEFAULT_CONV_KERNELS = (16, 16, 32, 32, 64)
FC_WIDTH = 512


def vgg_layers(
    kernels=DEFAULT_CONV_KERNELS,
    kernel_size: int = 3,
    pool_stride: int = 2,
    final_conv_stride: int = 1,
    fc_width: int = FC_WIDTH,
    dropout_rate: float = 0.25,
    n_classes: int = 2,
) -> list[LayerSpec]:
    """Standard tower: conv,conv,pool,conv,pool,conv,pool,conv then FC stack."""
    pool_after = {1, 3, 4}  # indices of conv layers followed by pooling
    layers: list[LayerSpec] = []
    for i, k in enumerate(kernels):
        stride = final_conv_stride if i == len(kernels) - 1 else 1
        layers.append(LayerSpec("conv", kernel_count=k, kernel_size=kernel_size, stride=stride))
        layers.append(LayerSpec("elu"))
        if i in pool_after:
            layers.append(LayerSpec("maxpool", kernel_size=2, stride=pool_stride))
    for _ in range(2):
        layers.append(LayerSpec("dense", units=fc_width))
        layers.append(LayerSpec("elu"))
        layers.append(LayerSpec("dropout", dropout_rate=dropout_rate))
    layers.append(LayerSpec("dense", units=n_classes))
    layers.append(LayerSpec("softmax"))
    return layers


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]  # (C, H, W)
    two_stream: bool = False

    def conv_output_shape(self) -> tuple[int, int, int]:
        c, h, w = self.input_shape
        for layer in self.layers:
            if layer.kind == "conv":
                k = layer.kernel_size
                if h < k or w < k:
                    raise SpecError(f"feature map {h}x{w} smaller than kernel {k}")
                h = (h - k) // layer.stride + 1
                w = (w - k) // layer.stride + 1
                c = layer.kernel_count
            elif layer.kind == "maxpool":
                if h < layer.kernel_size or w < layer.kernel_size:
                    raise SpecError("feature map smaller than pool window")
                h = (h - layer.kernel_size) // layer.stride + 1
                w = (w - layer.kernel_size) // layer.stride + 1
            elif layer.kind == "dense":
                break
        if h < 1 or w < 1:
            raise SpecError("input too small for the configured tower")
        return c, h, w

    def flat_width(self) -> int:
        c, h, w = self.conv_output_shape()
        n = c * h * w
        return 2 * n if self.two_stream else n


@dataclass
class NetworkState:
    """Learned parameters, ordered to match the parameterized layers of a spec."""

    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)
    rng_seed: int = 0

    def parameters(self) -> list[Tensor]:
        return list(self.weights) + list(self.biases)

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def init_state(spec: NetworkSpec, seed: int) -> NetworkState:
    """MSRA-style init: truncated normal std sqrt(2/fan_in); biases 0.001."""
    rng = np.random.default_rng(seed)
    state = NetworkState(rng_seed=seed)
    c_in = spec.input_shape[0]
    fan_flat = spec.flat_width()
    for layer in spec.layers:
        if layer.kind == "conv":
            k, kc = layer.kernel_size, layer.kernel_count
            fan_in = c_in * k * k
            state.weights.append(T.parameter(T.truncated_he_normal((kc, c_in, k, k), fan_in, rng)))
            state.biases.append(T.parameter(np.full(kc, T.BIAS_INIT)))
            c_in = kc
        elif layer.kind == "dense":
            fan_in = fan_flat
            state.weights.append(T.parameter(T.truncated_he_normal((layer.units, fan_in), fan_in, rng)))
            state.biases.append(T.parameter(np.full(layer.units, T.BIAS_INIT)))
            fan_flat = layer.units
    return state


def _conv_tower(x: Tensor, spec: NetworkSpec, state: NetworkState) -> Tensor:
    """Shared convolutional part: everything before the first dense layer."""
    p = 0
    for layer in spec.layers:
        if layer.kind == "conv":
            x = T.conv2d_forward(x, state.weights[p], state.biases[p], stride=layer.stride)
            p += 1
        elif layer.kind == "elu":
            x = T.elu(x)
        elif layer.kind == "maxpool":
            x = T.maxpool(x, layer.kernel_size, layer.stride)
        elif layer.kind in ("dense", "dropout", "softmax", "sigmoid"):
            break
    return T.flatten(x)


def _head(x: Tensor, spec: NetworkSpec, state: NetworkState,
          rng: np.random.Generator | None, capture: dict | None = None) -> Tensor:
    """Fully connected stack after the (possibly concatenated) flat features."""
    n_conv = sum(1 for l in spec.layers if l.kind == "conv")
    p = n_conv
    fc_index = 0
    started = False
    for layer in spec.layers:
        if layer.kind in ("conv", "maxpool") and not started:
            continue
        if layer.kind == "dense":
            started = True
            x = T.dense_forward(x, state.weights[p], state.biases[p])
            p += 1
            fc_index += 1
            if capture is not None and fc_index == 1:
                capture["fc1_pre"] = x
        elif layer.kind == "elu" and started:
            x = T.elu(x)
            if capture is not None and fc_index == 1 and "fc1" not in capture:
                capture["fc1"] = x
        elif layer.kind == "dropout" and started:
            x = T.dropout(x, layer.dropout_rate, rng)
        elif layer.kind == "softmax":
            x = T.softmax(x)
        elif layer.kind == "sigmoid":
            x = T.sigmoid(x)
    return x


def forward_single(patch: np.ndarray, spec: NetworkSpec, state: NetworkState,
                   rng: np.random.Generator | None = None,
                   capture: dict | None = None) -> Tensor:
    """Posterior for one [C,H,W] patch (or [H,W], promoted to one channel)."""
    if patch.ndim == 2:
        patch = patch[None]
    x = T.constant(patch)
    flat = _conv_tower(x, spec, state)
    return _head(flat, spec, state, rng, capture)


def forward_twostream(primary: np.ndarray, secondary: np.ndarray,
                      spec: NetworkSpec, state: NetworkState,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Two shared-kernel streams concatenated before FC1; primary is slot 1."""
    if primary.ndim == 2:
        primary = primary[None]
    if secondary.ndim == 2:
        secondary = secondary[None]
    if primary.shape != secondary.shape:
        raise SpecError(f"stream shapes differ: {primary.shape} vs {secondary.shape}")
    a = _conv_tower(T.constant(primary), spec, state)
    b = _conv_tower(T.constant(secondary), spec, state)
    return _head(T.concat(a, b), spec, state, rng)


def extract_fc1(patch: np.ndarray, spec: NetworkSpec, state: NetworkState) -> np.ndarray:
    """Deterministic FC1 activation (post-ELU, dropout off)."""
    capture: dict = {}
    forward_single(patch, spec, state, rng=None, capture=capture)
    return capture["fc1"].data.copy()


# ---------------------------------------------------------------------------
# binary serialization

MAGIC = b"ASYM"
FORMAT_VERSION = 1


def save_state(state: NetworkState, path) -> None:
    """Little-endian: magic, version, seed, entry count, then per-tensor
    (ndim u32, dims u64..., raw f64 payload). Weights first, then biases."""
    entries = list(state.weights) + list(state.biases)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IqI", FORMAT_VERSION, state.rng_seed, len(entries)))
        f.write(struct.pack("<I", len(state.weights)))
        for t in entries:
            dims = t.data.shape
            f.write(struct.pack("<I", len(dims)))
            f.write(struct.pack(f"<{len(dims)}Q", *dims))
            f.write(t.data.astype("<f8").tobytes())


def load_state(path) -> NetworkState:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise SpecError("bad magic in network state file")
        version, seed, n_entries = struct.unpack("<IqI", f.read(16))
        if version != FORMAT_VERSION:
            raise SpecError(f"unsupported format version {version}")
        (n_weights,) = struct.unpack("<I", f.read(4))
        entries = []
        for _ in range(n_entries):
            (ndim,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
            n = int(np.prod(dims))
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(dims)
            entries.append(T.parameter(data))
    state = NetworkState(rng_seed=seed)
    state.weights = entries[:n_weights]
    state.biases = entries[n_weights:]
    return state
