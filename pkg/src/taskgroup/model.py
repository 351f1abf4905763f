"""Shared convolutional feature extractor with per-task classification heads.

Layout: ``len(conv_blocks)`` blocks of (valid conv, relu, max pool), flattened,
then for every task a hidden fully connected layer with relu followed by a
single output unit. Hidden layers of all heads are stored stacked in one
[T * hidden, features] matrix so one matmul serves every head; head ``i`` owns
rows ``i*hidden:(i+1)*hidden`` and nothing else.

Checkpoint layout (little-endian)::

    bytes 0-7    magic b"TGCKPT01"
    uint32       header length H
    H bytes      UTF-8 JSON header: {"spec": ..., "task_ids": [...],
                 "params": [[name, shape], ...], "meta": {...}}
    float32 *    parameter blobs, C order, in the header's "params" order
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

CHECKPOINT_MAGIC = b"TGCKPT01"


class ModelSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ConvBlock:
    num_filters: int
    filter_width: int = 8
    pool_window: int = 4
    pool_stride: int = 4


@dataclass(frozen=True)
class ModelSpec:
    input_length: int = 1001
    conv_blocks: tuple[ConvBlock, ...] = (ConvBlock(64), ConvBlock(128), ConvBlock(256))
    head_hidden_units: int = 128
    num_tasks: int = 1
    # "shared": every head starts from the same draw so last-layer weights stay
    # comparable across tasks; "independent": one draw per head.
    head_init: str = "shared"
    in_channels: int = 4

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks",
                           tuple(b if isinstance(b, ConvBlock) else ConvBlock(*b) if not isinstance(b, dict)
                                 else ConvBlock(**b) for b in self.conv_blocks))

    def length_chain(self) -> list[tuple[int, int]]:
        """(after conv, after pool) length for every block."""
        chain = []
        length = self.input_length
        for b in self.conv_blocks:
            conv_len = length - b.filter_width + 1
            pool_len = tc.pool_output_length(conv_len, b.pool_window, b.pool_stride) if conv_len > 0 else 0
            chain.append((conv_len, pool_len))
            length = pool_len
            if length <= 0:
                break
        return chain

    def feature_length(self) -> int:
        if not self.conv_blocks:
            return self.input_length * self.in_channels
        chain = self.length_chain()
        if len(chain) < len(self.conv_blocks) or chain[-1][1] <= 0:
            return 0
        return chain[-1][1] * self.conv_blocks[-1].num_filters

    def validate(self) -> None:
        if self.num_tasks < 1:
            raise ModelSpecError(f"num_tasks must be >= 1, got {self.num_tasks}")
        if self.head_hidden_units < 1:
            raise ModelSpecError("head_hidden_units must be >= 1")
        if self.head_init not in ("shared", "independent"):
            raise ModelSpecError(f"unknown head_init {self.head_init!r}")
        if self.feature_length() <= 0:
            chain = " -> ".join(f"conv {c}, pool {p}" for c, p in self.length_chain())
            raise ModelSpecError(
                f"feature length collapses to <= 0 for input {self.input_length}: {chain}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [asdict(b) for b in self.conv_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["conv_blocks"] = tuple(ConvBlock(**b) for b in d["conv_blocks"])
        return cls(**d)


@dataclass
class TrainedModel:
    spec: ModelSpec
    conv: list[tuple[Tensor, Tensor]]
    hidden_weight: Tensor   # [T * h, features]
    hidden_bias: Tensor     # [T * h]
    out_weight: Tensor      # [T, h]
    out_bias: Tensor        # [T]
    task_ids: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return self.spec.num_tasks

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, (w, b) in enumerate(self.conv):
            named += [(f"conv{i}.weight", w), (f"conv{i}.bias", b)]
        named += [("heads.hidden.weight", self.hidden_weight), ("heads.hidden.bias", self.hidden_bias),
                  ("heads.out.weight", self.out_weight), ("heads.out.bias", self.out_bias)]
        return named

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.parameters()]

    def load_state(self, state: Sequence[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), state, strict=True):
            p.values[...] = v

    def head_slice(self, i: int) -> slice:
        h = self.spec.head_hidden_units
        return slice(i * h, (i + 1) * h)

    def head_parameters(self, i: int) -> dict[str, np.ndarray]:
        """Views onto the parameters owned by head ``i``."""
        self._check_task(i)
        s = self.head_slice(i)
        return {"hidden.weight": self.hidden_weight.values[s], "hidden.bias": self.hidden_bias.values[s],
                "out.weight": self.out_weight.values[i], "out.bias": self.out_bias.values[i:i + 1]}

    def select_heads(self, order: Sequence[int]) -> "TrainedModel":
        """Copy of the model keeping heads ``order`` (in that order) on a copied extractor."""
        for i in order:
            self._check_task(i)
        h = self.spec.head_hidden_units
        rows = np.concatenate([np.arange(i * h, (i + 1) * h) for i in order]) if len(order) else np.arange(0)
        spec = ModelSpec(**{**self.spec.__dict__, "num_tasks": len(order)})
        return TrainedModel(
            spec=spec,
            conv=[(Tensor(w.values.copy(), True, w.name), Tensor(b.values.copy(), True, b.name)) for w, b in self.conv],
            hidden_weight=Tensor(self.hidden_weight.values[rows].copy(), True, "heads.hidden.weight"),
            hidden_bias=Tensor(self.hidden_bias.values[rows].copy(), True, "heads.hidden.bias"),
            out_weight=Tensor(self.out_weight.values[list(order)].copy(), True, "heads.out.weight"),
            out_bias=Tensor(self.out_bias.values[list(order)].copy(), True, "heads.out.bias"),
            task_ids=[self.task_ids[i] for i in order] if self.task_ids else [],
            meta=dict(self.meta),
        )

    def _check_task(self, i: int) -> None:
        if not 0 <= i < self.num_tasks:
            raise IndexError(f"task index {i} out of range for {self.num_tasks} heads")


def build(spec: ModelSpec, seed: int, task_ids: Sequence[str] | None = None,
          dtype=np.float32) -> TrainedModel:
    """Fresh, untrained network with He-uniform weights and zero biases."""
    spec.validate()
    rng = np.random.default_rng([seed, 0])
    conv = []
    cin = spec.in_channels
    for i, b in enumerate(spec.conv_blocks):
        fan_in = cin * b.filter_width
        w = tc.he_uniform(rng, (b.num_filters, cin, b.filter_width), fan_in, dtype)
        conv.append((Tensor(w, True, f"conv{i}.weight"), Tensor(np.zeros(b.num_filters, dtype), True, f"conv{i}.bias")))
        cin = b.num_filters

    n_feat, h, T = spec.feature_length(), spec.head_hidden_units, spec.num_tasks
    if spec.head_init == "shared":
        head_rng = np.random.default_rng([seed, 1])
        w1 = tc.he_uniform(head_rng, (h, n_feat), n_feat, dtype)
        w2 = tc.he_uniform(head_rng, (h,), h, dtype)
        hidden_w = np.tile(w1, (T, 1))
        out_w = np.tile(w2, (T, 1))
    else:
        hidden_w = np.empty((T * h, n_feat), dtype)
        out_w = np.empty((T, h), dtype)
        for t in range(T):
            head_rng = np.random.default_rng([seed, 2, t])
            hidden_w[t * h:(t + 1) * h] = tc.he_uniform(head_rng, (h, n_feat), n_feat, dtype)
            out_w[t] = tc.he_uniform(head_rng, (h,), h, dtype)

    return TrainedModel(
        spec=spec,
        conv=conv,
        hidden_weight=Tensor(hidden_w, True, "heads.hidden.weight"),
        hidden_bias=Tensor(np.zeros(T * h, dtype), True, "heads.hidden.bias"),
        out_weight=Tensor(out_w, True, "heads.out.weight"),
        out_bias=Tensor(np.zeros(T, dtype), True, "heads.out.bias"),
        task_ids=list(task_ids) if task_ids is not None else [f"task{t}" for t in range(T)],
        meta={"seed": seed},
    )


def features(model: TrainedModel, x: Tensor) -> Tensor:
    spec = model.spec
    if x.values.ndim != 3 or x.shape[1:] != (spec.in_channels, spec.input_length):
        raise tc.ShapeError("forward", x.shape, (None, spec.in_channels, spec.input_length),
                            detail="input does not match model spec")
    for (w, b), blk in zip(model.conv, spec.conv_blocks):
        x = tc.maxpool1d(tc.relu(tc.conv1d(x, w, b)), blk.pool_window, blk.pool_stride)
    return tc.flatten(x)


def forward_logits(model: TrainedModel, x: Tensor | np.ndarray) -> Tensor:
    x = tc.as_tensor(x)
    f = features(model, x)
    hid = tc.relu(tc.fully_connected(f, model.hidden_weight, model.hidden_bias))
    hid = tc.reshape(hid, (x.shape[0], model.num_tasks, model.spec.head_hidden_units))
    return tc.head_output(hid, model.out_weight, model.out_bias)


def forward_all_heads(model: TrainedModel, x: Tensor | np.ndarray) -> Tensor:
    """[batch, T] probabilities; column t is head t applied to the shared features."""
    return tc.sigmoid(forward_logits(model, x))


def predict(model: TrainedModel, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Probabilities without recording a graph; ``x`` is one-hot [N, 4, L]."""
    outs = []
    with tc.no_grad():
        for start in range(0, len(x), batch_size):
            outs.append(forward_all_heads(model, Tensor(x[start:start + batch_size])).values)
    return np.concatenate(outs) if outs else np.zeros((0, model.num_tasks), np.float32)


def head_weight_vector(model: TrainedModel, task: int) -> np.ndarray:
    """Final fully connected weights of head ``task`` (bias excluded), length head_hidden_units."""
    model._check_task(task)
    return model.out_weight.values[task].copy()


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def save_checkpoint(model: TrainedModel, path: str | Path) -> None:
    named = model.named_parameters()
    header = {
        "spec": model.spec.to_dict(),
        "task_ids": list(model.task_ids),
        "params": [[name, list(p.shape)] for name, p in named],
        "meta": model.meta,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    for _, p in named:
        buf.write(np.ascontiguousarray(p.values, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> TrainedModel:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    spec = ModelSpec.from_dict(header["spec"])
    model = build(spec, seed=0, task_ids=header["task_ids"])
    offset = 12 + hlen
    params = dict(model.named_parameters())
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[name].values[...] = arr
        offset += 4 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter blobs")
    model.meta = header["meta"]
    return model
