"""The configurable micro-network: a shared convolutional trunk and toggleable P/H/B/S heads.

Each block (the trunk and every head) draws its initial weights from its own
generator, seeded by the network seed and the block label, so switching a
head on or off never changes any other block's initialization.
"""
from __future__ import annotations

from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
import struct
from typing import Any
import zlib

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .autodiff import (
    Tensor, as_tensor, concat, conv2d, matmul, parameter, reduce_mean, relu, sigmoid, softplus, take, upsample2x,
)
from .errors import CorruptCheckpoint, InvalidConfig, InvalidRequest, ShapeMismatch, TrainingDiverged
from .scene import N_KEYPOINTS

logger = logging.getLogger("Network")

Array = NDArray[np.float64]

TASK_ORDER = "PHBS"
TASK_NAMES = {"P": "direct pose", "H": "keypoint heatmaps", "B": "bounding box", "S": "segmentation"}


@dataclass(frozen=True)
class TaskSet:
    """Active heads, kept in canonical ``PHBS`` order."""
    active: tuple[str, ...]

    def __post_init__(self) -> None:
        unknown = [t for t in self.active if t not in TASK_ORDER]
        if unknown:
            raise InvalidConfig(f"unknown task letters {unknown}; use {TASK_ORDER}")
        if len(set(self.active)) != len(self.active):
            raise InvalidConfig(f"repeated task in {''.join(self.active)!r}")
        if not ({"P", "H"} & set(self.active)):
            raise InvalidConfig(f"task set {''.join(self.active)!r} estimates no pose; include P or H")
        object.__setattr__(self, "active", tuple(t for t in TASK_ORDER if t in self.active))

    @classmethod
    def parse(cls, text: str) -> "TaskSet":
        """Any letter order is accepted, so ``HSB`` names the same set as ``HBS``."""
        return cls(tuple(text.strip().upper()))

    def __str__(self) -> str:
        return "".join(self.active)

    def __contains__(self, task: object) -> bool:
        return task in self.active

    def __iter__(self) -> Iterator[str]:
        return iter(self.active)

    def __len__(self) -> int:
        return len(self.active)


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 64
    channels: tuple[int, ...] = (8, 16, 32, 64)
    strides: tuple[int, ...] = (1, 2, 2, 1)
    head_channels: int = 16
    n_keypoints: int = N_KEYPOINTS
    #: Middle of the distance range; scales the translation outputs.
    d_mid: float = 13.0
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.channels) != len(self.strides) or not self.channels:
            raise InvalidConfig(f"channels {self.channels} and strides {self.strides} must pair up")
        if any(s not in (1, 2) for s in self.strides):
            raise InvalidConfig(f"strides must be 1 or 2, got {self.strides}")
        if self.input_size % self.total_stride:
            raise InvalidConfig(f"input size {self.input_size} is not divisible by the trunk stride {self.total_stride}")
        if self.d_mid <= 0 or self.head_channels < 1 or any(c < 1 for c in self.channels):
            raise InvalidConfig("channel counts and d_mid must be positive")

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)

    @property
    def upsample_stages(self) -> int:
        return int(math.log2(self.total_stride))

    def output_shapes(self) -> dict[str, tuple[int, ...]]:
        s = self.input_size
        return {"P": (7,), "H": (self.n_keypoints, s, s), "B": (4,), "S": (1, s, s)}

    def as_dict(self) -> dict[str, Any]:
        return {
            "input_size": self.input_size, "channels": list(self.channels), "strides": list(self.strides),
            "head_channels": self.head_channels, "n_keypoints": self.n_keypoints,
            "d_mid": self.d_mid, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "NetworkConfig":
        values = dict(document)
        values["channels"] = tuple(values["channels"])
        values["strides"] = tuple(values["strides"])
        return cls(**values)


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    shape: tuple[int, ...]
    block: str
    fan_in: int
    gain: float


def layout(config: NetworkConfig, tasks: TaskSet) -> list[ParameterSpec]:
    """Every parameter of the network, in initialization order."""
    specs: list[ParameterSpec] = []

    def conv(block: str, name: str, c_in: int, c_out: int, gain: float) -> None:
        specs.append(ParameterSpec(f"{block}.{name}.w", (c_out, c_in, 3, 3), block, 9 * c_in, gain))
        specs.append(ParameterSpec(f"{block}.{name}.b", (c_out,), block, 9 * c_in, gain))

    c_in = 1
    for i, c_out in enumerate(config.channels):
        conv("trunk", f"conv{i}", c_in, c_out, 2.0)
        c_in = c_out
    features = config.channels[-1]
    for task in tasks:
        if task in "PB":
            width = 7 if task == "P" else 4
            specs.append(ParameterSpec(f"{task}.fc.w", (features, width), task, features, 1.0))
            specs.append(ParameterSpec(f"{task}.fc.b", (width,), task, features, 1.0))
        else:
            out = config.n_keypoints if task == "H" else 1
            stages = max(config.upsample_stages, 1)
            c = features
            for j in range(stages):
                last = j == stages - 1
                c_next = out if last else config.head_channels
                conv(task, f"conv{j}", c, c_next, 1.0 if last else 2.0)
                c = c_next
    return specs


def block_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(label.encode("utf-8"))]))


def initialize(config: NetworkConfig, tasks: TaskSet) -> dict[str, Array]:
    """He-style fan-in initialization; biases start at zero."""
    values: dict[str, Array] = {}
    generators: dict[str, np.random.Generator] = {}
    for spec in layout(config, tasks):
        rng = generators.setdefault(spec.block, block_rng(config.seed, spec.block))
        if spec.name.endswith(".b"):
            values[spec.name] = np.zeros(spec.shape)
        else:
            values[spec.name] = rng.normal(0.0, math.sqrt(spec.gain / spec.fan_in), size=spec.shape)
    return values


class Network:
    """Trunk plus the active heads. One trainer at a time may mutate the parameters."""
    def __init__(self, config: NetworkConfig, tasks: TaskSet, values: Mapping[str, ArrayLike]) -> None:
        self.logger = logging.getLogger(self.__class__.__qualname__)
        self.config = config
        self.tasks = tasks
        specs = layout(config, tasks)
        expected = {s.name for s in specs}
        if set(values) != expected:
            missing, extra = sorted(expected - set(values)), sorted(set(values) - expected)
            raise InvalidConfig(f"parameters do not match tasks {tasks}: missing {missing}, unexpected {extra}")
        self.parameters: dict[str, Tensor] = {}
        self.blocks: dict[str, str] = {}
        for spec in specs:
            data = np.array(values[spec.name], dtype=np.float64)
            if data.shape != spec.shape:
                raise ShapeMismatch(f"parameter {spec.name}", data.shape, spec.shape)
            self.parameters[spec.name] = parameter(data, spec.name)
            self.blocks[spec.name] = spec.block

    @property
    def shared_parameter(self) -> Tensor:
        """The last trunk convolution's weights, the anchor for gradient balancing."""
        return self.parameters[f"trunk.conv{len(self.config.channels) - 1}.w"]

    def parameter_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {"trunk": 0} | {t: 0 for t in self.tasks}
        for name, tensor in self.parameters.items():
            counts[self.blocks[name]] += tensor.data.size
        counts["total"] = sum(counts.values())
        return counts

    def zero_grad(self) -> None:
        for tensor in self.parameters.values():
            tensor.zero_grad()

    def values(self) -> dict[str, Array]:
        return {name: tensor.data.copy() for name, tensor in self.parameters.items()}

    def trunk(self, images: Tensor) -> Tensor:
        x = images
        for i, stride in enumerate(self.config.strides):
            p = f"trunk.conv{i}"
            x = relu(conv2d(x, self.parameters[f"{p}.w"], self.parameters[f"{p}.b"], stride))
        return x

    def _map_head(self, task: str, features: Tensor) -> Tensor:
        stages = max(self.config.upsample_stages, 1)
        x = features
        for j in range(stages):
            if j < self.config.upsample_stages:
                x = upsample2x(x)
            x = conv2d(x, self.parameters[f"{task}.conv{j}.w"], self.parameters[f"{task}.conv{j}.b"], 1)
            x = relu(x) if j < stages - 1 else sigmoid(x)
        return x

    def _affine(self, task: str, pooled: Tensor) -> Tensor:
        return matmul(pooled, self.parameters[f"{task}.fc.w"]) + self.parameters[f"{task}.fc.b"]

    def _pose_head(self, pooled: Tensor) -> Tensor:
        """``(q_raw, t)``; q_raw is offset toward identity and t_z is positive."""
        a = self._affine("P", pooled)
        d = self.config.d_mid
        q_raw = take(a, 0, 4, axis=1) + as_tensor(np.array([1.0, 0.0, 0.0, 0.0]))
        t_xy = take(a, 4, 6, axis=1) * d
        t_z = softplus(take(a, 6, 7, axis=1)) * (d / math.log(2.0))
        return concat([q_raw, t_xy, t_z], axis=1)

    def _box_head(self, pooled: Tensor) -> Tensor:
        """``(cx, cy, w, h)`` in pixels; sizes pass through softplus."""
        a = self._affine("B", pooled)
        size = float(self.config.input_size)
        centers = (take(a, 0, 2, axis=1) + 0.5) * size
        extents = softplus(take(a, 2, 4, axis=1)) * (size / 4.0)
        return concat([centers, extents], axis=1)

    def forward(self, images: ArrayLike | Tensor) -> dict[str, Tensor]:
        """Outputs of the active heads for an (N, 1, S, S) image batch."""
        x = as_tensor(images)
        s = self.config.input_size
        if x.data.ndim != 4 or x.shape[1:] != (1, s, s):
            raise ShapeMismatch("forward", x.shape, (-1, 1, s, s))
        features = self.trunk(x)
        outputs: dict[str, Tensor] = {}
        pooled = reduce_mean(features, axis=(2, 3)) if {"P", "B"} & set(self.tasks) else None
        for task in self.tasks:
            if task == "P":
                assert pooled is not None
                outputs[task] = self._pose_head(pooled)
            elif task == "B":
                assert pooled is not None
                outputs[task] = self._box_head(pooled)
            else:
                outputs[task] = self._map_head(task, features)
        return outputs

    def predict(self, images: ArrayLike) -> dict[str, Array]:
        return {task: out.data for task, out in self.forward(images).items()}

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(tasks={self.tasks}, parameters={self.parameter_counts()['total']})"


def build_network(config: NetworkConfig, tasks: TaskSet) -> Network:
    network = Network(config, tasks, initialize(config, tasks))
    network.logger.info("Built %s: %s", tasks, network.parameter_counts())
    return network


# Optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def sgd_adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Array | None],
    state: AdamState,
    lr: float,
) -> AdamState:
    """One bias-corrected Adam update, in place. A missing gradient counts as zero."""
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ShapeMismatch(f"adam({name})", g.shape, params[name].shape)
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(
                f"non-finite gradient for parameter {name!r} at step {state.step}",
                {"parameter": name, "step": state.step},
            )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        m = b1 * state.m.get(name, np.zeros_like(g)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(g)) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** state.step)
        v_hat = v / (1 - b2 ** state.step)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


# Checkpoints
#
#   offset  size   field
#   0       4      magic b"MTLC"
#   4       1      format version, uint8 (1)
#   5       3      zero pad
#   8       4      header length L, uint32 little-endian
#   12      L      UTF-8 JSON header, sorted keys: config, tasks, step, parameters [{name, shape}], extra
#   12+L    ...    parameters in header order, float64 little-endian, row-major

CHECKPOINT_MAGIC = b"MTLC"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<4sB3xI")


@dataclass(frozen=True, eq=False)
class Checkpoint:
    network: Network
    step: int = 0
    extra: dict[str, Any] = field(default_factory=dict)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    net = checkpoint.network
    header = {
        "config": net.config.as_dict(),
        "tasks": str(net.tasks),
        "step": checkpoint.step,
        "parameters": [{"name": n, "shape": list(t.shape)} for n, t in net.parameters.items()],
        "extra": checkpoint.extra,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in net.parameters.values())
    return _PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + payload


def decode_checkpoint(data: bytes, name: str = "<bytes>") -> Checkpoint:
    if len(data) < _PREAMBLE.size:
        raise CorruptCheckpoint(f"{name}: truncated preamble")
    magic, version, length = _PREAMBLE.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{name}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"{name}: format version {version} is not {CHECKPOINT_VERSION}")
    try:
        header = json.loads(data[_PREAMBLE.size:_PREAMBLE.size + length].decode("utf-8"))
        config = NetworkConfig.from_dict(header["config"])
        tasks = TaskSet.parse(header["tasks"])
        entries = [(e["name"], tuple(e["shape"])) for e in header["parameters"]]
        step = int(header["step"])
    except (KeyError, TypeError, ValueError) as ex:
        raise CorruptCheckpoint(f"{name}: malformed header: {ex!r}") from ex
    offset = _PREAMBLE.size + length
    values: dict[str, Array] = {}
    for pname, shape in entries:
        size = math.prod(shape) * 8
        if offset + size > len(data):
            raise CorruptCheckpoint(f"{name}: payload truncated at parameter {pname!r}")
        values[pname] = np.frombuffer(data, dtype="<f8", count=math.prod(shape), offset=offset).reshape(shape).copy()
        offset += size
    if offset != len(data):
        raise CorruptCheckpoint(f"{name}: {len(data) - offset} trailing bytes")
    return Checkpoint(Network(config, tasks, values), step, dict(header.get("extra", {})))


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    logger.info("Saved %s (step %d) to %s", checkpoint.network, checkpoint.step, path)


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as ex:
        raise CorruptCheckpoint(f"cannot read {path}: {ex.strerror}") from ex
    return decode_checkpoint(data, str(path))


def strip_auxiliary_heads(checkpoint: Checkpoint, keep: TaskSet) -> Checkpoint:
    """A checkpoint carrying only the ``keep`` heads; the trunk is untouched."""
    net = checkpoint.network
    dropped_missing = [t for t in keep if t not in net.tasks]
    if dropped_missing:
        raise InvalidRequest(f"checkpoint has tasks {net.tasks}, cannot keep {''.join(dropped_missing)}")
    values = {n: t.data for n, t in net.parameters.items() if net.blocks[n] == "trunk" or net.blocks[n] in keep}
    pruned = Network(net.config, keep, values)
    logger.info("Pruned %s -> %s", net.parameter_counts(), pruned.parameter_counts())
    return Checkpoint(pruned, checkpoint.step, dict(checkpoint.extra) | {"pruned_from": str(net.tasks)})
