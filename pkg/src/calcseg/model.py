"""The slim per-pixel FCN.

``num_blocks`` blocks, each running parallel same-padded convolutions of
different kernel sizes over the previous block's output and concatenating the
results, followed by ReLU. A final convolution maps to a single logit channel.
Everything is stride 1, so the logit map has the input's spatial shape.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, DimensionMismatchError

CHECKPOINT_MAGIC = b"CSEG"
CHECKPOINT_VERSION = 1
_ARCH_HEADER = "calcseg-arch v1"


@dataclass(frozen=True)
class ArchConfig:
    num_blocks: int = 5
    branch_kernels: tuple[int, ...] = (1, 3, 5, 9)
    branch_width: int = 16
    final_kernel: int = 5
    input_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "branch_kernels", tuple(int(k) for k in self.branch_kernels))
        self.validate()

    def validate(self):
        if self.num_blocks < 1:
            raise ConfigError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if self.branch_width < 1:
            raise ConfigError(f"branch_width must be >= 1, got {self.branch_width}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        if not self.branch_kernels:
            raise ConfigError("branch_kernels must not be empty")
        for k in (*self.branch_kernels, self.final_kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be positive and odd, got {k}")

    @property
    def block_channels(self) -> int:
        return self.branch_width * len(self.branch_kernels)

    def to_text(self, dataset: str | None = None) -> str:
        """Canonical text record stored in checkpoints."""
        lines = [
            _ARCH_HEADER,
            f"num_blocks={self.num_blocks}",
            f"branch_kernels={','.join(map(str, self.branch_kernels))}",
            f"branch_width={self.branch_width}",
            f"final_kernel={self.final_kernel}",
            f"input_channels={self.input_channels}",
        ]
        if dataset:
            lines.append(f"dataset={dataset}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> tuple["ArchConfig", str | None]:
        lines = text.strip().splitlines()
        if not lines or lines[0] != _ARCH_HEADER:
            raise CheckpointError(f"unrecognised architecture record header {lines[:1]}")
        fields = dict(line.split("=", 1) for line in lines[1:])
        try:
            cfg = cls(
                num_blocks=int(fields["num_blocks"]),
                branch_kernels=tuple(int(k) for k in fields["branch_kernels"].split(",")),
                branch_width=int(fields["branch_width"]),
                final_kernel=int(fields["final_kernel"]),
                input_channels=int(fields["input_channels"]),
            )
        except KeyError as exc:
            raise CheckpointError(f"architecture record missing field {exc}") from None
        return cfg, fields.get("dataset")


def receptive_field(config: ArchConfig) -> int:
    """Side length of the input window that can influence one output pixel."""
    return 1 + config.num_blocks * (max(config.branch_kernels) - 1) + (config.final_kernel - 1)


def layer_shapes(config: ArchConfig) -> list[tuple[int, int, int]]:
    """(out, in, k) for every conv layer in build order."""
    shapes = []
    in_ch = config.input_channels
    for _ in range(config.num_blocks):
        for k in config.branch_kernels:
            shapes.append((config.branch_width, in_ch, k))
        in_ch = config.block_channels
    shapes.append((1, in_ch, config.final_kernel))
    return shapes


def parameter_count(config: ArchConfig) -> int:
    return sum(k * k * i * o + o for o, i, k in layer_shapes(config))


@dataclass
class Model:
    config: ArchConfig
    blocks: list[list[T.ConvLayer]]
    final: T.ConvLayer
    dataset: str | None = None

    @property
    def layers(self) -> list[T.ConvLayer]:
        return [layer for block in self.blocks for layer in block] + [self.final]

    @property
    def parameter_count(self) -> int:
        return sum(layer.num_parameters for layer in self.layers)

    @property
    def dtype(self):
        return self.final.kernel.dtype

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in build order: kernel, bias for each layer."""
        out = []
        for layer in self.layers:
            out.extend((layer.kernel, layer.bias))
        return out

    def layer_names(self) -> list[str]:
        names = [f"block{b}.k{k}" for b in range(self.config.num_blocks)
                 for k in self.config.branch_kernels]
        return names + ["final"]

    def parameter_names(self) -> list[str]:
        return [f"{n}.{p}" for n in self.layer_names() for p in ("kernel", "bias")]

    def astype(self, dtype) -> "Model":
        return Model(self.config, [[l.astype(dtype) for l in b] for b in self.blocks],
                     self.final.astype(dtype), self.dataset)

    def copy(self) -> "Model":
        return self.astype(self.dtype)


def model_from_parameters(config: ArchConfig, params: list[np.ndarray],
                          dataset: str | None = None) -> Model:
    shapes = layer_shapes(config)
    if len(params) != 2 * len(shapes):
        raise DimensionMismatchError("wrong number of parameter arrays", 2 * len(shapes),
                                     len(params))
    layers = []
    for i, (o, c, k) in enumerate(shapes):
        kernel = np.asarray(params[2 * i]).reshape(o, c, k, k)
        bias = np.asarray(params[2 * i + 1]).reshape(o)
        layers.append(T.ConvLayer(kernel, bias))
    nb = len(config.branch_kernels)
    blocks = [layers[b * nb:(b + 1) * nb] for b in range(config.num_blocks)]
    return Model(config, blocks, layers[-1], dataset)


def build_model(config: ArchConfig = ArchConfig(), seed: int = 0, dtype=np.float32) -> Model:
    """He-uniform kernels (bound sqrt(6 / fan_in)), zero biases, drawn in build order."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = []
    for o, c, k in layer_shapes(config):
        bound = np.sqrt(6.0 / (c * k * k))
        params.append(rng.uniform(-bound, bound, size=(o, c, k, k)).astype(dtype))
        params.append(np.zeros(o, dtype=dtype))
    return model_from_parameters(config, params)


@dataclass
class ForwardCache:
    """Activations kept by forward(..., keep=True) for backward()."""

    block_inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    final_input: np.ndarray | None = None


def forward(model: Model, x: np.ndarray, keep: bool = False):
    """Per-pixel logits (batch, 1, H, W). With ``keep`` also returns a ForwardCache."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionMismatchError("input must be (batch, channels, H, W)", 4, x.ndim)
    if x.shape[1] != model.config.input_channels:
        raise DimensionMismatchError("input channel count does not match model",
                                     model.config.input_channels, x.shape[1])
    x = np.ascontiguousarray(x, dtype=model.dtype)
    cache = ForwardCache() if keep else None
    h = x
    for block in model.blocks:
        pre = T.concat_channels([T.conv2d_forward(h, layer) for layer in block])
        if keep:
            cache.block_inputs.append(h)
            cache.pre_activations.append(pre)
        h = T.activate(pre, "relu")
    if keep:
        cache.final_input = h
    logits = T.conv2d_forward(h, model.final)
    return (logits, cache) if keep else logits


def backward(model: Model, cache: ForwardCache, grad_logits: np.ndarray) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, in parameters() order."""
    g_h, g_final_k, g_final_b = T.conv2d_backward(cache.final_input, model.final, grad_logits)
    block_grads = []
    widths = [l.out_channels for l in model.blocks[0]]
    for b in range(len(model.blocks) - 1, -1, -1):
        g_pre = T.activate_backward(cache.pre_activations[b], g_h, "relu")
        x_in = cache.block_inputs[b]
        g_x = np.zeros_like(x_in)
        grads = []
        for layer, g_branch in zip(model.blocks[b], T.split_channels(g_pre, widths)):
            gi, gk, gb = T.conv2d_backward(x_in, layer, g_branch)
            g_x += gi
            grads.extend((gk, gb))
        block_grads.append(grads)
        g_h = g_x
    out = [g for grads in reversed(block_grads) for g in grads]
    return out + [g_final_k, g_final_b]


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def checkpoint_bytes(model: Model) -> bytes:
    """Serialise a model.

    Layout: b"CSEG", version (u8), architecture record length (u32 LE), the
    UTF-8 architecture record, every parameter array as little-endian float32
    in build order, then an 8-byte little-endian BLAKE2b-64 checksum of all
    preceding bytes.
    """
    text = model.config.to_text(model.dataset).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(text)), text]
    parts.extend(np.asarray(p, dtype="<f4").tobytes() for p in model.parameters())
    payload = b"".join(parts)
    return payload + struct.pack("<Q", _checksum(payload))


def model_from_bytes(blob: bytes) -> Model:
    if len(blob) < 17 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a calcseg checkpoint (bad magic)")
    payload, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if _checksum(payload) != stored:
        raise CheckpointError("checkpoint checksum mismatch")
    version, n = struct.unpack("<BI", payload[4:9])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config, dataset = ArchConfig.from_text(payload[9:9 + n].decode("utf-8"))
    flat = np.frombuffer(payload[9 + n:], dtype="<f4")
    if flat.size != parameter_count(config):
        raise CheckpointError(
            f"parameter payload has {flat.size} values, architecture needs {parameter_count(config)}")
    params, pos = [], 0
    for o, c, k in layer_shapes(config):
        for size in (o * c * k * k, o):
            params.append(flat[pos:pos + size].astype(np.float32))
            pos += size
    return model_from_parameters(config, params, dataset)


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
