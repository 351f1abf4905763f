"""Synthetic task suites with planted task groups.

Every group owns a few private motifs; a set of shared motifs feeds every
task. A task's latent score is a weighted count of motif presence plus Gaussian
noise, thresholded at the quantile that yields the configured positive rate.
Shared motifs enter group ``g`` with weight ``1 - c + c * s_g`` where
``s_g = +1`` for even groups and ``-1`` for odd ones, so ``c = conflict_strength``
moves the odd groups from agreeing with the even ones (c=0) to the opposite
label direction (c=1).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtr

from .data import TEST, TRAIN, VALIDATION, TaskDataset


class InfeasibleMotifError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_groups: int = 4
    tasks_per_group: int = 6
    seq_length: int = 201
    n_examples: int = 20_000        # training examples
    n_validation: int = 4_000
    n_test: int = 4_000
    motif_length: int = 8
    motifs_per_group: int = 2
    shared_motifs: int = 2
    conflict_strength: float = 0.5
    plant_prob: float = 0.3
    label_noise: float = 0.35
    positive_rate: float = 0.3
    seed: int = 0


def _make_motifs(rng: np.random.Generator, count: int, length: int, min_distance: int) -> np.ndarray:
    motifs: list[np.ndarray] = []
    for _ in range(10_000):
        if len(motifs) == count:
            break
        cand = rng.integers(0, 4, length, dtype=np.uint8)
        if all((cand != m).sum() >= min_distance for m in motifs):
            motifs.append(cand)
    if len(motifs) < count:
        raise InfeasibleMotifError(
            f"could not draw {count} motifs of length {length} at Hamming distance >= {min_distance}")
    return np.array(motifs, dtype=np.uint8).reshape(count, length)


def _plant(rng: np.random.Generator, n: int, cfg: SynthConfig, motifs: np.ndarray):
    """Random background with each motif planted independently in a private slot."""
    m, k = motifs.shape
    slot = k + 1
    n_slots = cfg.seq_length // slot
    if m > n_slots:
        raise InfeasibleMotifError(
            f"{m} motifs of length {k} do not fit in sequences of length {cfg.seq_length}")
    codes = rng.integers(0, 4, (n, cfg.seq_length), dtype=np.uint8)
    present = rng.random((n, m)) < cfg.plant_prob
    # distinct slot per motif per example: first m columns of a random permutation
    slots = np.argsort(rng.random((n, n_slots)), axis=1)[:, :m]
    slack = cfg.seq_length - n_slots * slot
    # jitter of 0/1 inside the slot keeps neighbours disjoint; the shift uses the leftover tail
    offsets = slots * slot + rng.integers(0, 2, (n, m)) + rng.integers(0, slack + 1, (n, 1))
    rows, cols = np.nonzero(present)
    pos = offsets[rows, cols][:, None] + np.arange(k)[None, :]
    codes[rows[:, None], pos] = motifs[cols]
    return codes, present


def task_weights(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """[T, num_motifs] weight matrix and planted group per task.

    Motif order: group 0 private, group 1 private, ..., then shared.
    """
    G, P, S = cfg.num_groups, cfg.motifs_per_group, cfg.shared_motifs
    T = G * cfg.tasks_per_group
    W = np.zeros((T, G * P + S))
    groups = np.repeat(np.arange(G), cfg.tasks_per_group)
    c = cfg.conflict_strength
    for t, g in enumerate(groups):
        W[t, g * P:(g + 1) * P] = rng.uniform(0.75, 1.25, P)
        sign = 1.0 if g % 2 == 0 else -1.0
        W[t, G * P:] = (1.0 - c + c * sign) * rng.uniform(0.75, 1.25, S)
    return W, groups


def _calibrate(latent: np.ndarray, rate: float):
    """Per-task thresholds giving ``rate`` positives among examples with at least one positive."""
    kept = np.ones(len(latent), dtype=bool)
    for _ in range(50):
        thresholds = np.quantile(latent[kept], 1.0 - rate, axis=0)
        labels = (latent >= thresholds).astype(np.uint8)
        now = labels.any(axis=1)
        if np.array_equal(now, kept):
            break
        kept = now
    return labels, thresholds, kept


def synth_generate(cfg: SynthConfig | None = None, **overrides) -> TaskDataset:
    """Build a planted-group suite; ``task_metadata[t]["planted_group"]`` holds the truth."""
    cfg = cfg or SynthConfig()
    if overrides:
        cfg = SynthConfig(**{**asdict(cfg), **overrides})
    if cfg.num_groups < 2:
        raise ValueError("need at least two groups")
    if not 0.0 < cfg.positive_rate < 1.0:
        raise ValueError("positive_rate must be in (0, 1)")
    rng = np.random.default_rng(cfg.seed)
    n_motifs = cfg.num_groups * cfg.motifs_per_group + cfg.shared_motifs
    motifs = _make_motifs(rng, n_motifs, cfg.motif_length, max(1, cfg.motif_length // 2))
    W, groups = task_weights(cfg, rng)
    T = len(groups)

    sizes = {TRAIN: cfg.n_examples, VALIDATION: cfg.n_validation, TEST: cfg.n_test}
    total = sum(sizes.values())
    # oversample so dropping all-negative examples still leaves `total`; grow the draw if not
    for attempt in range(8):
        draw = (2 << attempt) * total + 64
        seq_rng = np.random.default_rng([cfg.seed, 1, attempt])
        codes, present = _plant(seq_rng, draw, cfg, motifs)
        latent = present @ W.T + cfg.label_noise * seq_rng.standard_normal((draw, T))
        labels, thresholds, kept = _calibrate(latent, cfg.positive_rate)
        keep = np.flatnonzero(kept)
        if keep.size >= total:
            break
    else:
        raise InfeasibleMotifError("too many all-negative examples; raise positive_rate")
    keep = keep[:total]
    splits = np.concatenate([np.full(sizes[s], s, np.uint8) for s in (TRAIN, VALIDATION, TEST)])

    meta = [{"planted_group": str(int(g)), "task_index_in_group": str(t % cfg.tasks_per_group)}
            for t, g in enumerate(groups)]
    return TaskDataset(
        codes=np.ascontiguousarray(codes[keep]),
        labels=labels[keep],
        splits=splits,
        chrom_index=np.zeros(total, np.int32),
        starts=np.arange(total, dtype=np.int64) * 200,
        chroms=["synthetic"],
        task_ids=[f"g{g}_t{t % cfg.tasks_per_group}" for t, g in enumerate(groups)],
        task_metadata=meta,
        meta={"synth": asdict(cfg), "motifs": ["".join("ACGT"[b] for b in m) for m in motifs],
              "weights": W.tolist(), "thresholds": thresholds.tolist()},
    )


def label_probability(ds: TaskDataset, present: np.ndarray) -> np.ndarray:
    """P(label = 1 | motif presence, example kept) per task under the generator's model.

    Noise is independent across tasks, so given presence the chance an example
    survives the all-negative filter is 1 - prod(1 - p_t), and a positive label
    implies survival.
    """
    W = np.asarray(ds.meta["weights"])
    thr = np.asarray(ds.meta["thresholds"])
    sigma = ds.meta["synth"]["label_noise"]
    p = ndtr((present @ W.T - thr) / sigma)
    kept = 1.0 - np.prod(1.0 - p, axis=1, keepdims=True)
    return p / kept


def scan_motifs(ds: TaskDataset) -> np.ndarray:
    """[N, num_motifs] presence of each planted motif found by direct string search."""
    motifs = ds.meta["motifs"]
    seqs = ["".join("ACGTN"[c] for c in row) for row in ds.codes]
    return np.array([[m in s for m in motifs] for s in seqs], dtype=bool)
