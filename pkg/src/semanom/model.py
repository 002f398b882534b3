"""Small multi-head CNN: shared conv trunk, class head, optional auxiliary head.

Trunk block i is ``conv3x3 -> normalization -> relu`` followed by a 2x2 pool
for every block but the last; the trunk ends in a global average pool.
Normalization layers keep one scale/shift pair per task, so the CPC task can
run the shared convolutions with its own affine parameters.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor

AUX_TASKS = ("none", "rotation", "cpc")
NORMS = ("instance", "layer")
# below this many pixels per channel, instance statistics fall back to layer statistics
MIN_INSTANCE_PIXELS = 16

CHECKPOINT_MAGIC = b"SEMM"
CHECKPOINT_VERSION = 1


@dataclass
class Arch:
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 64)
    pool: str = "max"
    padding: str = "zero"
    norm: str = "instance"
    n_classes: int = 2
    aux_task: str = "none"
    cpc_blocks: int = 3
    cpc_steps: int = 1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)

    @property
    def tasks(self) -> tuple[str, ...]:
        return ("cls", "cpc") if self.aux_task == "cpc" else ("cls",)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @property
    def cpc_dim(self) -> int:
        return self.widths[self.cpc_blocks - 1]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Arch":
        return cls(**json.loads(text))


def truncated_normal(rng: Rng, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) redrawn until every entry lies within +-bound*std."""
    out = rng.normal(0.0, 1.0, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class MultiHeadModel:
    def __init__(self, arch: Arch, params: dict[str, Tensor]):
        self.arch = arch
        self.params = params
        self.frozen = False

    # -- parameter bookkeeping -------------------------------------------------

    @property
    def has_rot_head(self) -> bool:
        return "rot_head.w" in self.params

    @property
    def has_cpc_head(self) -> bool:
        return "cpc_head.context.w" in self.params

    @property
    def heads(self) -> list[str]:
        out = ["class_head"]
        if self.has_rot_head:
            out.append("rot_head")
        if self.has_cpc_head:
            out.append("cpc_head")
        return out

    def named(self, prefix: str) -> list[Tensor]:
        return [p for name, p in self.params.items() if name.startswith(prefix)]

    def trunk_params(self, task: str = "cls", blocks: int | None = None) -> list[Tensor]:
        n = len(self.arch.widths) if blocks is None else blocks
        out = []
        for i in range(n):
            out.append(self.params[f"trunk.block{i}.conv.w"])
            out.append(self.params[f"trunk.block{i}.norm.{task}.scale"])
            out.append(self.params[f"trunk.block{i}.norm.{task}.shift"])
        return out

    def primary_params(self) -> list[Tensor]:
        return self.trunk_params("cls") + self.named("class_head.")

    def aux_params(self) -> list[Tensor]:
        if self.arch.aux_task == "rotation":
            return self.trunk_params("cls") + self.named("rot_head.")
        if self.arch.aux_task == "cpc":
            return self.trunk_params("cpc", self.arch.cpc_blocks) + self.named("cpc_head.")
        return []

    def freeze(self) -> "MultiHeadModel":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    # -- forward ---------------------------------------------------------------

    def features(self, x, task: str = "cls", blocks: int | None = None) -> Tensor:
        """Trunk output after global average pooling, N x width."""
        if task not in self.arch.tasks:
            raise ValueError(f"model has no normalization parameters for task {task!r}")
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        n = len(self.arch.widths) if blocks is None else blocks
        pool = T.maxpool2d if self.arch.pool == "max" else T.avgpool2d
        for i in range(n):
            p = self.params
            x = T.conv2d(x, p[f"trunk.block{i}.conv.w"], padding=1, pad_mode=self.arch.padding)
            per_channel = self.arch.norm == "instance" and x.shape[-1] * x.shape[-2] >= MIN_INSTANCE_PIXELS
            x = T.normalization(x, p[f"trunk.block{i}.norm.{task}.scale"], p[f"trunk.block{i}.norm.{task}.shift"],
                                per_channel=per_channel)
            x = T.relu(x)
            if i < len(self.arch.widths) - 1 and min(x.shape[-2:]) >= 2:
                x = pool(x, 2)
        return T.mean(x, axis=(2, 3))

    def _linear(self, h: Tensor, name: str) -> Tensor:
        return T.add(T.matmul(h, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def class_logits(self, x) -> Tensor:
        return self._linear(self.features(x), "class_head")

    def rot_logits(self, x) -> Tensor:
        if not self.has_rot_head:
            raise ValueError("model has no rotation head")
        return self._linear(self.features(x), "rot_head")

    def encode_patches(self, patches) -> Tensor:
        """CPC patch encodings: first ``cpc_blocks`` trunk blocks under the cpc norms."""
        return self.features(patches, task="cpc", blocks=self.arch.cpc_blocks)

    def cpc_context(self, z: Tensor) -> Tensor:
        return self._linear(z, "cpc_head.context")

    def cpc_predict(self, c: Tensor, step: int) -> Tensor:
        return T.matmul(c, self.params[f"cpc_head.pred{step}.w"])

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        with T.no_grad():
            out = [self.class_logits(images[i:i + batch_size]).data
                   for i in range(0, len(images), batch_size)]
        return np.concatenate(out).argmax(axis=1)


def build_model(arch: Arch, n_classes: int | None = None, aux_task: str | None = None,
                rng: Rng | None = None) -> MultiHeadModel:
    """Fresh model; conv and linear weights are truncated-normal fan-in scaled, biases zero.

    Each parameter draws from its own named stream, so adding a head does not
    change the initial values of the others.
    """
    d = asdict(arch)
    if n_classes is not None:
        d["n_classes"] = n_classes
    if aux_task is not None:
        d["aux_task"] = aux_task
    arch = Arch(**d)
    if arch.n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {arch.n_classes}")
    if arch.aux_task not in AUX_TASKS:
        raise ValueError(f"unknown aux task {arch.aux_task!r}; expected one of {AUX_TASKS}")
    if arch.pool not in ("max", "avg"):
        raise ValueError(f"unknown pool {arch.pool!r}")
    if arch.norm not in NORMS:
        raise ValueError(f"unknown norm {arch.norm!r}; expected one of {NORMS}")
    if arch.aux_task == "cpc":
        arch.padding = "symmetric"
        if not 1 <= arch.cpc_blocks <= len(arch.widths):
            raise ValueError("cpc_blocks must select at least one trunk block")
    rng = rng if rng is not None else Rng(0)
    init = rng.child("init")
    params: dict[str, Tensor] = {}

    def new(name, data):
        params[name] = Tensor(data, requires_grad=True)

    c_in = arch.in_channels
    for i, width in enumerate(arch.widths):
        fan_in = c_in * 9
        new(f"trunk.block{i}.conv.w", truncated_normal(init.child(f"trunk.block{i}.conv.w"),
                                                       (width, c_in, 3, 3), np.sqrt(2.0 / fan_in)))
        for task in arch.tasks:
            new(f"trunk.block{i}.norm.{task}.scale", np.ones(width))
            new(f"trunk.block{i}.norm.{task}.shift", np.zeros(width))
        c_in = width

    d = arch.feature_dim
    new("class_head.w", truncated_normal(init.child("class_head.w"), (d, arch.n_classes), np.sqrt(1.0 / d)))
    new("class_head.b", np.zeros(arch.n_classes))
    if arch.aux_task == "rotation":
        new("rot_head.w", truncated_normal(init.child("rot_head.w"), (d, 4), np.sqrt(1.0 / d)))
        new("rot_head.b", np.zeros(4))
    elif arch.aux_task == "cpc":
        e = arch.cpc_dim
        new("cpc_head.context.w", truncated_normal(init.child("cpc_head.context.w"), (e, e), np.sqrt(1.0 / e)))
        new("cpc_head.context.b", np.zeros(e))
        for step in range(1, arch.cpc_steps + 1):
            new(f"cpc_head.pred{step}.w",
                truncated_normal(init.child(f"cpc_head.pred{step}.w"), (e, e), np.sqrt(1.0 / e)))
    return MultiHeadModel(arch, params)


# ---------------------------------------------------------------------------
# checkpoints: SEMM | u32 version | u32 len | arch json | u64 count | f64 LE params


def save_checkpoint(model: MultiHeadModel, path) -> None:
    arch = model.arch.to_json().encode("utf-8")
    flat = model.flat_parameters().astype("<f8")
    blob = (CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(arch)) + arch
            + struct.pack("<Q", flat.size) + flat.tobytes())
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> MultiHeadModel:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic {buf[:4]!r})")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    arch = Arch.from_json(buf[12:12 + n].decode("utf-8"))
    (count,) = struct.unpack_from("<Q", buf, 12 + n)
    flat = np.frombuffer(buf, dtype="<f8", offset=20 + n)
    if flat.size != count:
        raise ValueError(f"{path}: expected {count} parameters, found {flat.size}")
    model = build_model(arch)
    if sum(p.size for p in model.params.values()) != count:
        raise ValueError(f"{path}: parameter count does not match architecture")
    pos = 0
    for p in model.params.values():
        p.data = flat[pos:pos + p.size].reshape(p.shape).astype(np.float64)
        pos += p.size
    return model.freeze()
