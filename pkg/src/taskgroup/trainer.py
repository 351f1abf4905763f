"""Single-task, all-task and group-wise joint training.

Training runs plain mini-batch SGD on the summed per-task binary cross-entropy,
validates every ``validate_every`` steps and stops once ``patience``
validations pass without a new minimum; the returned model carries the
parameters from the best validation round, not the last step.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import model as M
from . import tensorcore as tc
from .data import TEST, TRAIN, VALIDATION, TaskDataset

log = logging.getLogger(__name__)

SINGLE_TASK_LR = 0.01
PHASE_ONE_GRID = (0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35)
PHASE_TWO_STEP = 0.025


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at step {step}")
        self.step = step


class LRSearchError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    batch_size: int = 64
    max_steps: int = 1_920_000
    validate_every: int = 16_000
    patience: int = 25
    learning_rate: float | None = None   # None: 0.01 for one task, otherwise must be searched or set
    seed: int = 0
    eval_batch_size: int = 1024

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1 or self.validate_every < 1 or self.max_steps < 1:
            raise ValueError("batch_size, patience, validate_every and max_steps must all be >= 1")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class TrainingLog:
    entries: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_loss: float = math.inf
    stop_reason: str = ""
    wall_time: float = 0.0
    learning_rate: float = 0.0
    seed: int = 0
    task_ids: list[str] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [loss for _, loss in self.entries]

    def record(self, step: int, loss: float) -> bool:
        """Append a validation result; True when it is a new strict minimum."""
        if self.entries and step <= self.entries[-1][0]:
            raise ValueError(f"validation steps must increase ({step} after {self.entries[-1][0]})")
        self.entries.append((step, loss))
        if loss < self.best_loss:
            self.best_loss, self.best_step = loss, step
            return True
        return False

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for step, loss in self.entries:
                fh.write(json.dumps({"step": step, "loss": loss}) + "\n")
            summary = {k: v for k, v in asdict(self).items() if k != "entries"}
            fh.write(json.dumps({"summary": summary}) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "TrainingLog":
        out = cls()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            if "summary" in rec:
                for k, v in rec["summary"].items():
                    setattr(out, k, v)
            else:
                out.entries.append((rec["step"], rec["loss"]))
        return out


@dataclass
class TrainResult:
    model: M.TrainedModel
    log: TrainingLog
    task_indices: list[int]


def early_stop_check(losses: Sequence[float], patience: int) -> bool:
    """True (stop) once ``patience`` validations have passed since the first minimum."""
    if not losses:
        raise ValueError("no validation losses recorded")
    best = int(np.argmin(losses))
    return len(losses) - 1 - best >= patience


def derive_seed(seed: int, task_ids: Iterable[str]) -> int:
    """Seed for one training run, independent of the order groups are processed in."""
    key = f"{seed}|" + ",".join(sorted(task_ids))
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little") >> 1


class _Batches:
    """Endless seeded shuffles of the training indices."""

    def __init__(self, indices: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.indices, self.batch_size, self.rng = indices, batch_size, rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos >= len(self._order):
            self._order = self.rng.permutation(self.indices)
            self._pos = 0
        batch = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch


def validation_loss(model: M.TrainedModel, x: np.ndarray, y: np.ndarray, batch_size: int = 1024) -> float:
    """Mean over examples of the per-example BCE summed over the model's tasks."""
    total = 0.0
    with tc.no_grad():
        for s in range(0, len(x), batch_size):
            xb = tc.Tensor(x[s:s + batch_size])
            loss = tc.bce_with_logits(M.forward_logits(model, xb), y[s:s + batch_size])
            total += float(loss.values) * len(xb.values)
    return total / len(x)


def train_joint(dataset: TaskDataset, task_subset: Sequence[int | str], config: TrainingConfig,
                model_spec: M.ModelSpec) -> TrainResult:
    """Train one network with a head per task in ``task_subset`` on the train split.

    ``model_spec.num_tasks`` is replaced by the subset size. Heads are ordered by
    dataset column. One task gives single-task learning; all tasks give simple
    multi-task learning.
    """
    if len(task_subset) == 0:
        raise ValueError("task_subset is empty")
    cols = sorted({dataset.task_index(t) for t in task_subset})
    ids = [dataset.task_ids[c] for c in cols]
    seed = derive_seed(config.seed, ids)
    lr = config.learning_rate
    if lr is None:
        if len(cols) > 1:
            raise ValueError("joint training needs a learning rate; run lr_search or set one")
        lr = SINGLE_TASK_LR

    train_idx = dataset.split_indices(TRAIN)
    val_idx = dataset.split_indices(VALIDATION)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError("dataset needs non-empty train and validation splits")

    spec = M.ModelSpec(**{**model_spec.__dict__, "num_tasks": len(cols),
                          "input_length": dataset.window_length})
    model = M.build(spec, seed, ids)
    model.meta.update({"learning_rate": lr, "base_seed": config.seed})
    params = model.parameters()
    labels = dataset.labels[:, cols].astype(np.float32)
    x_val, y_val = dataset.onehot(val_idx), labels[val_idx]
    batches = _Batches(train_idx, config.batch_size, np.random.default_rng([seed, 1]))

    tlog = TrainingLog(learning_rate=lr, seed=seed, task_ids=ids)
    best_state = model.state()
    t0 = time.perf_counter()
    step = 0
    while True:
        idx = batches.next()
        loss = tc.bce_with_logits(M.forward_logits(model, dataset.onehot(idx)), labels[idx])
        value = float(loss.values)
        if not math.isfinite(value):
            raise TrainingDivergedError(step + 1, value)
        tc.zero_grads(params)
        loss.backward()
        tc.sgd_step(params, lr)
        step += 1

        if step % config.validate_every == 0 or step == config.max_steps:
            vloss = validation_loss(model, x_val, y_val, config.eval_batch_size)
            if not math.isfinite(vloss):
                raise TrainingDivergedError(step, vloss)
            if tlog.record(step, vloss):
                best_state = model.state()
            log.debug("tasks=%d step=%d val=%.5f best=%d", len(cols), step, vloss, tlog.best_step)
            if early_stop_check(tlog.losses, config.patience):
                tlog.stop_reason = "patience_exhausted"
                break
            if step >= config.max_steps:
                tlog.stop_reason = "max_steps"
                break

    model.load_state(best_state)
    tlog.wall_time = time.perf_counter() - t0
    model.meta["best_step"] = tlog.best_step
    return TrainResult(model, tlog, cols)


def phase_two_grid(best: float) -> list[float]:
    return [round(v, 6) for v in (best - PHASE_TWO_STEP, best + PHASE_TWO_STEP) if v > 0]


def lr_search(train_fn: Callable[[float], float], mode: str = "joint",
              trials: dict[float, float] | None = None) -> float:
    """Pick a learning rate by validation loss.

    ``single_task`` returns 0.01 without calling ``train_fn``. ``joint`` evaluates
    0.05..0.35 in steps of 0.05, then the two points 0.025 either side of the
    phase-one winner, and returns the overall argmin (ties to the smaller rate).
    Diverged runs (non-finite loss or TrainingDivergedError) count as +inf.
    ``trials``, when given, receives every evaluated (lr, loss).
    """
    if mode == "single_task":
        return SINGLE_TASK_LR
    if mode != "joint":
        raise ValueError(f"unknown lr_search mode {mode!r}")
    seen: dict[float, float] = {} if trials is None else trials

    def evaluate(grid):
        for lr in grid:
            if lr in seen:
                continue
            try:
                loss = float(train_fn(lr))
            except (TrainingDivergedError, tc.NonFiniteGradientError):
                loss = math.inf
            seen[lr] = loss if math.isfinite(loss) else math.inf

    def best_of() -> float:
        return min(seen, key=lambda lr: (seen[lr], lr))

    evaluate(PHASE_ONE_GRID)
    if all(math.isinf(v) for v in seen.values()):
        raise LRSearchError(f"every learning rate diverged: {seen}")
    evaluate(phase_two_grid(best_of()))
    return best_of()


def _partition(groups: Sequence[Sequence[int]], num_tasks: int) -> list[list[int]]:
    flat = [t for g in groups for t in g]
    if any(len(g) == 0 for g in groups):
        raise ValueError("grouping contains an empty group")
    if sorted(flat) != list(range(num_tasks)):
        raise ValueError("grouping is not a partition of the dataset's tasks")
    return [sorted(g) for g in groups]


def _train_group(args):
    dataset, group, config, spec = args
    return train_joint(dataset, group, config, spec)


def run_grouping_mode(dataset: TaskDataset, grouping, config: TrainingConfig, model_spec: M.ModelSpec,
                      workers: int = 1, learning_rates: Sequence[float | None] | None = None) -> list[TrainResult]:
    """Train every group from scratch; one result per group in grouping order.

    ``grouping`` is a list of task-index lists or an object with ``groups()``.
    Singleton groups train at ``config.learning_rate`` when set, else 0.01.
    ``learning_rates`` optionally overrides the rate per group.
    """
    groups = grouping.groups() if hasattr(grouping, "groups") else grouping
    groups = _partition(groups, dataset.num_tasks)
    jobs = []
    for i, g in enumerate(groups):
        cfg = config
        if learning_rates is not None and learning_rates[i] is not None:
            cfg = TrainingConfig(**{**asdict(config), "learning_rate": learning_rates[i]})
        jobs.append((dataset, g, cfg, model_spec))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_group, jobs))
    return [_train_group(j) for j in jobs]


def predict_split(result: TrainResult, dataset: TaskDataset, split: int = TEST,
                  batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """(probabilities, labels) on ``split`` for the result's tasks, columns in result order."""
    idx = dataset.split_indices(split)
    probs = M.predict(result.model, dataset.onehot(idx), batch_size)
    return probs, dataset.labels[np.ix_(idx, result.task_indices)]
