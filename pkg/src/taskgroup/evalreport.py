"""F1 scoring and method comparison tables.

Aggregates are macro averages: the arithmetic mean of per-task F1.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

THRESHOLD = 0.5
ALL = "All"


@dataclass(frozen=True)
class TaskScore:
    task_id: str
    f1: float
    precision: float
    recall: float
    positives_in_test: int
    method: str = ""
    tp: int = 0
    fp: int = 0
    fn: int = 0


def f1(predictions, labels, threshold: float = THRESHOLD, task_id: str = "", method: str = "") -> TaskScore:
    """Precision, recall and F1 of hard predictions ``prob >= threshold``.

    Each of P, R and F1 is 0 when its denominator is 0.
    """
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if p.size == 0:
        raise ValueError("cannot score an empty test set")
    if p.shape != y.shape:
        raise ValueError(f"predictions and labels differ in length: {p.size} vs {y.size}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    hard = p >= threshold
    pos = y == 1
    tp = int((hard & pos).sum())
    fp = int((hard & ~pos).sum())
    fn = int((~hard & pos).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    score = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return TaskScore(task_id, score, precision, recall, int(pos.sum()), method, tp, fp, fn)


def score_tasks(probs: np.ndarray, labels: np.ndarray, task_ids: Sequence[str], method: str = "",
                threshold: float = THRESHOLD) -> dict[str, TaskScore]:
    return {t: f1(probs[:, j], labels[:, j], threshold, t, method) for j, t in enumerate(task_ids)}


def _f1_map(scores) -> dict[str, float]:
    if isinstance(scores, Mapping):
        return {k: (v.f1 if isinstance(v, TaskScore) else float(v)) for k, v in scores.items()}
    return {s.task_id: s.f1 for s in scores}


def improvement_table(reference, baseline, strata: Mapping[str, str] | None = None) -> dict[str, float]:
    """Percent change of mean F1, reference over baseline, per stratum and overall.

    ``strata`` maps task id to its stratum label (e.g. modality); overall is under "All".
    """
    ref, base = _f1_map(reference), _f1_map(baseline)
    if set(ref) != set(base):
        raise ValueError("reference and baseline cover different tasks")
    buckets: dict[str, list[str]] = {}
    if strata is not None:
        for t in sorted(ref):
            buckets.setdefault(str(strata[t]), []).append(t)
    buckets[ALL] = sorted(ref)
    table = {}
    for name, tasks in sorted(buckets.items(), key=lambda kv: (kv[0] == ALL, kv[0])):
        mb = float(np.mean([base[t] for t in tasks]))
        mr = float(np.mean([ref[t] for t in tasks]))
        if mb == 0:
            raise ZeroDivisionError(f"baseline mean F1 is zero in stratum {name!r}")
        table[name] = 100.0 * (mr - mb) / mb
    return table


@dataclass
class PairwiseComparison:
    records: list[tuple[str, float, float]]   # (task, f1_a, f1_b)
    mean_a: float
    mean_b: float
    fraction_b_below_a: float
    fraction_a_below_b: float


def pairwise_comparison(method_a, method_b) -> PairwiseComparison:
    """Per-task (F1_a, F1_b) pairs; with a = STL, ``fraction_b_below_a`` is the negative-transfer fraction of b."""
    a, b = _f1_map(method_a), _f1_map(method_b)
    if set(a) != set(b):
        raise ValueError("methods cover different tasks")
    tasks = sorted(a)
    recs = [(t, a[t], b[t]) for t in tasks]
    n = len(tasks)
    return PairwiseComparison(
        records=recs,
        mean_a=float(np.mean([a[t] for t in tasks])),
        mean_b=float(np.mean([b[t] for t in tasks])),
        fraction_b_below_a=sum(b[t] < a[t] for t in tasks) / n,
        fraction_a_below_b=sum(a[t] < b[t] for t in tasks) / n,
    )


# ----------------------------------------------------------------------------
# report files
# ----------------------------------------------------------------------------

def write_scores(path: str | Path, scores_by_method: Mapping[str, Mapping[str, TaskScore]]) -> None:
    fields = ["method", "task_id", "f1", "precision", "recall", "positives_in_test", "tp", "fp", "fn"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(fields)
        for method in sorted(scores_by_method):
            for task in sorted(scores_by_method[method]):
                s = scores_by_method[method][task]
                w.writerow([method, task, repr(s.f1), repr(s.precision), repr(s.recall),
                            s.positives_in_test, s.tp, s.fp, s.fn])


def read_scores(path: str | Path) -> dict[str, dict[str, TaskScore]]:
    out: dict[str, dict[str, TaskScore]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            s = TaskScore(row["task_id"], float(row["f1"]), float(row["precision"]), float(row["recall"]),
                          int(row["positives_in_test"]), row["method"], int(row["tp"]), int(row["fp"]),
                          int(row["fn"]))
            out.setdefault(s.method, {})[s.task_id] = s
    return out


def build_report(scores_by_method: Mapping[str, Mapping[str, TaskScore]], reference: str,
                 strata: Mapping[str, Mapping[str, str]] | None = None, single_task: str = "STL") -> dict:
    """Machine-readable summary of every comparison between ``reference`` and the other methods.

    ``strata`` maps a stratification name (e.g. "modality") to a task -> label map.
    """
    summary: dict = {"reference": reference, "methods": {}, "improvement": {}, "pairwise": {}}
    for method in sorted(scores_by_method):
        f1s = [s.f1 for s in scores_by_method[method].values()]
        summary["methods"][method] = {"mean_f1": float(np.mean(f1s)), "num_tasks": len(f1s)}
    ref = scores_by_method[reference]
    for method in sorted(scores_by_method):
        if method == reference:
            continue
        base = scores_by_method[method]
        entry = {"overall": improvement_table(ref, base)[ALL]}
        for name, mapping in sorted((strata or {}).items()):
            entry[name] = improvement_table(ref, base, mapping)
        summary["improvement"][method] = entry
    if single_task in scores_by_method:
        stl = scores_by_method[single_task]
        for method in sorted(scores_by_method):
            if method == single_task:
                continue
            cmp = pairwise_comparison(stl, scores_by_method[method])
            summary["pairwise"][method] = {
                "mean_stl": cmp.mean_a, "mean_method": cmp.mean_b,
                "negative_transfer_fraction": cmp.fraction_b_below_a,
                "records": [list(r) for r in cmp.records],
            }
    return summary


def write_report(out_dir: str | Path, scores_by_method: Mapping[str, Mapping[str, TaskScore]], reference: str,
                 strata: Mapping[str, Mapping[str, str]] | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = build_report(scores_by_method, reference, strata)
    write_scores(out / "scores.tsv", scores_by_method)
    with open(out / "improvement.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["baseline", "stratification", "stratum", "improvement_percent"])
        for method, entry in summary["improvement"].items():
            w.writerow([method, "", ALL, repr(entry["overall"])])
            for name in sorted(k for k in entry if k != "overall"):
                for stratum, value in entry[name].items():
                    w.writerow([method, name, stratum, repr(value)])
    with open(out / "pairwise.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["method", "task_id", "f1_stl", "f1_method"])
        for method, entry in summary["pairwise"].items():
            for task, fa, fb in entry["records"]:
                w.writerow([method, task, repr(fa), repr(fb)])
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
