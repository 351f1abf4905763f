"""Command line pipeline: data -> joint training -> embedding -> clustering -> grouped training -> report.

Every command reads and writes files under ``--out-dir`` and records what it
produced in ``<out-dir>/manifest.json`` together with sha256 digests of its
inputs and outputs. A command refuses to run when an input file no longer
matches the digest recorded when it was produced.

``--config`` takes a JSON file. Top-level keys apply to every command and a
key named after a command (e.g. ``"train-joint"``) holds overrides for that
command; keys are option names with dashes or underscores. Flags given on the
command line win over the file.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import clustering as C
from . import data as D
from . import embedding as EMB
from . import evalreport as R
from . import model as M
from . import trainer as TR
from .synth import SynthConfig, synth_generate

log = logging.getLogger("taskgroup")

MANIFEST = "manifest.json"
DATASET = "dataset.tgd"


class CLIError(Exception):
    category = "error"


class InputError(CLIError):
    category = "input"


class DigestMismatch(CLIError):
    category = "digest_mismatch"


# ----------------------------------------------------------------------------
# run manifest
# ----------------------------------------------------------------------------

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


class RunManifest:
    """Artifacts produced under one output directory, keyed by path relative to it."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.path = out_dir / MANIFEST
        self.data = {"artifacts": {}, "stages": []}
        if self.path.exists():
            self.data = json.loads(self.path.read_text())

    def _key(self, path: Path) -> str:
        path = Path(path).resolve()
        try:
            return str(path.relative_to(self.out_dir.resolve()))
        except ValueError:
            return str(path)

    def check(self, path: str | Path) -> str:
        """Digest of an input file, verified against the recorded digest when there is one."""
        path = Path(path)
        if not path.exists():
            raise InputError(f"missing input file: {path}")
        digest = sha256_file(path)
        rec = self.data["artifacts"].get(self._key(path))
        if rec is not None and rec["sha256"] != digest:
            raise DigestMismatch(f"{path}: recorded sha256 {rec['sha256']} but file has {digest}")
        return digest

    def record(self, stage: str, outputs: Sequence[Path], inputs: dict[str, str], cfg: dict, seed) -> None:
        outs = {}
        for p in outputs:
            digest = sha256_file(p)
            self.data["artifacts"][self._key(p)] = {"sha256": digest, "stage": stage}
            outs[self._key(p)] = digest
        self.data["stages"].append({
            "stage": stage, "seed": seed, "config_sha256": config_digest(cfg), "config": cfg,
            "inputs": {self._key(Path(k)): v for k, v in inputs.items()}, "outputs": outs,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        })
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=str) + "\n")


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _k_range(text: str) -> list[int]:
    lo, _, hi = text.partition(":")
    if not hi:
        raise InputError(f"--k-sweep expects LO:HI, got {text!r}")
    return list(range(int(lo), int(hi) + 1))


def _model_spec(args, ds: D.TaskDataset) -> M.ModelSpec:
    blocks = tuple(M.ConvBlock(f, args.filter_width, args.pool, args.pool) for f in _ints(args.filters))
    return M.ModelSpec(input_length=ds.window_length, conv_blocks=blocks, head_hidden_units=args.hidden,
                       head_init=args.head_init)


def _train_config(args, lr=None) -> TR.TrainingConfig:
    return TR.TrainingConfig(batch_size=args.batch, max_steps=args.max_steps, validate_every=args.validate_every,
                             patience=args.patience, learning_rate=lr, seed=args.seed)


def _load_dataset(man: RunManifest, path) -> tuple[D.TaskDataset, str]:
    digest = man.check(path)
    return D.load_dataset(path), digest


def _resolve(out: Path, value, default: str) -> Path:
    return Path(value) if value else out / default


def _scores_for(results: Sequence[TR.TrainResult], ds: D.TaskDataset, method: str) -> dict[str, R.TaskScore]:
    scores = {}
    for res in results:
        probs, labels = TR.predict_split(res, ds)
        ids = [ds.task_ids[c] for c in res.task_indices]
        scores.update(R.score_tasks(probs, labels, ids, method))
    return scores


def _pick_lr(args, ds, tasks: list[int], spec: M.ModelSpec) -> float:
    """Learning rate for one training run: explicit flag, fixed single-task rate, or two-phase search.

    With ``--lr-scale per-task`` an explicit rate is divided by the number of
    tasks in the run, i.e. SGD on the mean rather than the sum of task losses.
    """
    if len(tasks) == 1:
        return args.stl_lr if args.stl_lr is not None else TR.SINGLE_TASK_LR
    if args.lr is not None:
        return args.lr / len(tasks) if args.lr_scale == "per-task" else args.lr

    def trial(lr):
        return TR.train_joint(ds, tasks, _train_config(args, lr), spec).log.best_loss
    lr = TR.lr_search(trial, "joint")
    log.info("lr search over %d tasks chose %.3f", len(tasks), lr)
    return lr


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_synth(args, man: RunManifest) -> None:
    cfg = SynthConfig(num_groups=args.groups, tasks_per_group=args.tasks_per_group, seq_length=args.seq_length,
                      n_examples=args.n_examples, n_validation=args.n_validation, n_test=args.n_test,
                      motif_length=args.motif_length, conflict_strength=args.conflict,
                      positive_rate=args.positive_rate, seed=args.seed)
    ds = synth_generate(cfg)
    out = _resolve(args.out_dir, args.output, DATASET)
    D.save_dataset(ds, out)
    man.record("synth", [out], {}, asdict(cfg), args.seed)
    print(f"wrote {out}: {ds.num_examples} examples, {ds.num_tasks} tasks, {cfg.num_groups} planted groups")


def cmd_ingest(args, man: RunManifest) -> None:
    if not Path(args.manifest).exists():
        raise InputError(f"manifest file not found: {args.manifest}")
    inputs = {args.fasta: man.check(args.fasta), args.manifest: man.check(args.manifest)}
    vchrom, vstart, vend = args.validation_region.replace("-", ":").split(":")
    ds = D.ingest(args.fasta, args.manifest, args.bin, args.window, args.min_overlap,
                  tuple(args.test_chroms.split(",")), (vchrom, int(vstart), int(vend)))
    out = _resolve(args.out_dir, args.output, DATASET)
    D.save_dataset(ds, out)
    man.record("ingest", [out], inputs, {k: v for k, v in vars(args).items() if k != "func"}, args.seed)
    print(f"wrote {out}: {ds.num_examples} examples, {ds.num_tasks} tasks, splits {D.split_counts(ds)}")


def cmd_train_joint(args, man: RunManifest) -> None:
    path = _resolve(args.out_dir, args.dataset, DATASET)
    ds, digest = _load_dataset(man, path)
    tasks = list(range(ds.num_tasks)) if args.tasks == "all" else \
        [int(t) if t.isdigit() else ds.task_index(t) for t in args.tasks.split(",")]
    spec = _model_spec(args, ds)
    lr = _pick_lr(args, ds, tasks, spec)
    res = TR.train_joint(ds, tasks, _train_config(args, lr), spec)
    name = args.name or ("joint" if len(tasks) == ds.num_tasks else "tasks_" + "_".join(map(str, sorted(tasks))))
    ckpt, logf = args.out_dir / f"{name}.ckpt", args.out_dir / f"{name}.log.jsonl"
    M.save_checkpoint(res.model, ckpt)
    res.log.to_jsonl(logf)
    man.record("train-joint", [ckpt, logf], {str(path): digest},
               {"spec": spec.to_dict(), "training": asdict(_train_config(args, lr)), "tasks": tasks}, args.seed)
    print(f"wrote {ckpt}: best step {res.log.best_step}, val loss {res.log.best_loss:.5f} ({res.log.stop_reason})")


def cmd_embed(args, man: RunManifest) -> None:
    ckpt = _resolve(args.out_dir, args.checkpoint, "joint.ckpt")
    digest = man.check(ckpt)
    emb = EMB.extract_embeddings(M.load_checkpoint(ckpt), source=digest)
    if args.normalize:
        emb = emb.normalized()
    out = _resolve(args.out_dir, args.output, "embedding.tsv")
    emb.to_tsv(out)
    outputs = [out]
    if emb.shape[0] >= 2:
        k = min(args.pca, *emb.shape)
        res = EMB.pca(emb, k)
        proj = out.with_name(out.stem + ".pca.tsv")
        EMB.save_projection(proj, res, emb.task_ids)
        outputs.append(proj)
    man.record("embed", outputs, {str(ckpt): digest}, {"normalize": args.normalize, "pca": args.pca}, args.seed)
    print(f"wrote {out}: {emb.shape[0]} tasks x {emb.shape[1]} dims")


def _cluster_once(args, emb, K) -> C.GroupingSolution:
    algo = args.algo
    if algo == "kmeans":
        return C.kmeans(emb, K, args.seed, args.restarts)
    if algo == "ward":
        return C.ward_agglomerative(emb, K)
    if algo == "spectral":
        return C.spectral(emb, K, args.seed, args.bandwidth, args.restarts)
    if algo == "dbscan":
        return C.dbscan(emb, args.eps, args.min_pts)
    if algo == "ssc":
        return C.ssc(emb, args.sparsity, K, args.seed)
    raise InputError(f"unknown algorithm {algo!r}")


def cmd_cluster(args, man: RunManifest) -> None:
    inputs = {}
    if args.algo in ("metadata", "all_in_one", "singletons"):
        path = _resolve(args.out_dir, args.dataset, DATASET)
        ds, inputs[str(path)] = _load_dataset(man, path)
        if args.algo == "metadata":
            if not args.key:
                raise InputError("--algo metadata needs --key")
            sols = [C.metadata_grouping(D.metadata_values(ds, args.key), ds.task_ids, args.key)]
            stem = f"grouping_metadata_{args.key}"
        elif args.algo == "all_in_one":
            sols, stem = [C.all_in_one(ds.num_tasks, ds.task_ids)], "grouping_all_in_one"
        else:
            sols, stem = [C.singletons(ds.num_tasks, ds.task_ids)], "grouping_singletons"
        outs = [args.out_dir / f"{stem}.tsv"]
    else:
        path = _resolve(args.out_dir, args.embedding, "embedding.tsv")
        inputs[str(path)] = man.check(path)
        emb = EMB.TaskEmbeddingMatrix.from_tsv(path)
        ks = _k_range(args.k_sweep) if args.k_sweep else [args.k]
        if args.algo == "dbscan":
            ks = [0]
        sols = [_cluster_once(args, emb, K) for K in ks]
        outs = [args.out_dir / (f"grouping_{args.algo}.tsv" if args.algo == "dbscan"
                                else f"grouping_{args.algo}_k{K}.tsv") for K in ks]
    for sol, out in zip(sols, outs):
        sol.to_tsv(out)
        print(f"wrote {out}: K={sol.K}" + (f", objective {sol.objective_value:.6g}"
                                             if sol.objective_value is not None else ""))
    man.record("cluster", outs, inputs, {k: v for k, v in vars(args).items() if k not in ("func", "out_dir")},
               args.seed)


def cmd_train_groups(args, man: RunManifest) -> None:
    path = _resolve(args.out_dir, args.dataset, DATASET)
    ds, digest = _load_dataset(man, path)
    inputs = {str(path): digest}
    if args.mode == "stl":
        grouping, method = C.singletons(ds.num_tasks, ds.task_ids), args.method or "STL"
    elif args.mode == "smtl":
        grouping, method = C.all_in_one(ds.num_tasks, ds.task_ids), args.method or "SMTL"
    else:
        if not args.grouping:
            raise InputError("--grouping is required unless --mode stl/smtl")
        inputs[args.grouping] = man.check(args.grouping)
        grouping, method = C.GroupingSolution.from_tsv(args.grouping), args.method or "KMTL"
        if grouping.task_ids and list(grouping.task_ids) != list(ds.task_ids):
            raise InputError("grouping task ids do not match the dataset")
    spec = _model_spec(args, ds)
    groups = grouping.groups()
    rates = [_pick_lr(args, ds, g, spec) for g in groups]
    results = TR.run_grouping_mode(ds, groups, _train_config(args), spec, workers=args.workers,
                                   learning_rates=rates)
    gdir = args.out_dir / f"models_{method}"
    gdir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, res in enumerate(results):
        ck = gdir / f"group{i}.ckpt"
        M.save_checkpoint(res.model, ck)
        res.log.to_jsonl(gdir / f"group{i}.log.jsonl")
        outputs += [ck, gdir / f"group{i}.log.jsonl"]
    scores = _scores_for(results, ds, method)
    sfile = args.out_dir / f"scores_{method}.tsv"
    R.write_scores(sfile, {method: scores})
    outputs.append(sfile)
    man.record("train-groups", outputs, inputs,
               {"method": method, "groups": groups, "rates": rates, "spec": spec.to_dict(),
                "training": asdict(_train_config(args))}, args.seed)
    mean = float(np.mean([s.f1 for s in scores.values()]))
    print(f"wrote {sfile}: {len(groups)} groups, mean test F1 {mean:.4f}")


def cmd_report(args, man: RunManifest) -> None:
    files = args.scores or sorted(str(p) for p in args.out_dir.glob("scores_*.tsv"))
    if not files:
        raise InputError("no score files given or found in the output directory")
    inputs, merged = {}, {}
    for f in files:
        inputs[f] = man.check(f)
        merged.update(R.read_scores(f))
    if args.reference not in merged:
        raise InputError(f"reference method {args.reference!r} not among {sorted(merged)}")
    strata = None
    if args.strata:
        path = _resolve(args.out_dir, args.dataset, DATASET)
        ds, inputs[str(path)] = _load_dataset(man, path)
        strata = {key: dict(zip(ds.task_ids, D.metadata_values(ds, key))) for key in args.strata.split(",")}
    rdir = args.out_dir / "report"
    summary = R.write_report(rdir, merged, args.reference, strata)
    man.record("report", sorted(rdir.iterdir()), inputs, {"reference": args.reference, "strata": args.strata},
               args.seed)
    for method, info in summary["methods"].items():
        print(f"{method}\tmean F1 {info['mean_f1']:.4f}")


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def _add_model_args(p):
    p.add_argument("--filters", default="64,128,256", help="filters per conv block")
    p.add_argument("--filter-width", type=int, default=8)
    p.add_argument("--pool", type=int, default=4, help="pool window and stride")
    p.add_argument("--hidden", type=int, default=128, help="hidden units per head")
    p.add_argument("--head-init", choices=("shared", "independent"), default="shared")


def _add_train_args(p):
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--validate-every", type=int, default=16_000)
    p.add_argument("--patience", type=int, default=25)
    p.add_argument("--max-steps", type=int, default=1_920_000)
    p.add_argument("--lr", type=float, default=None, help="joint rate; searched when omitted")
    p.add_argument("--stl-lr", type=float, default=None, help="single-task rate (default 0.01)")
    p.add_argument("--lr-scale", choices=("none", "per-task"), default="none",
                   help="per-task: divide --lr by the number of tasks trained together")
    p.add_argument("--dataset", default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--out-dir", type=Path, default=Path("run"))
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="taskgroup", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a planted-group suite")
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--tasks-per-group", type=int, default=6)
    p.add_argument("--seq-length", type=int, default=201)
    p.add_argument("--n-examples", type=int, default=20_000)
    p.add_argument("--n-validation", type=int, default=4_000)
    p.add_argument("--n-test", type=int, default=4_000)
    p.add_argument("--motif-length", type=int, default=8)
    p.add_argument("--conflict", type=float, default=0.5)
    p.add_argument("--positive-rate", type=float, default=0.3)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="build a dataset from FASTA + peak files")
    p.add_argument("--fasta", required=True)
    p.add_argument("--manifest", required=True, help="TSV with task_id, peak_path and tag columns")
    p.add_argument("--bin", type=int, default=D.BIN_SIZE)
    p.add_argument("--window", type=int, default=D.WINDOW)
    p.add_argument("--min-overlap", type=int, default=D.MIN_OVERLAP)
    p.add_argument("--test-chroms", default=",".join(D.TEST_CHROMS))
    p.add_argument("--validation-region", default="%s:%d-%d" % D.VALIDATION_REGION)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train-joint", parents=[common], help="train one network on a task subset")
    p.add_argument("--tasks", default="all", help="'all' or comma-separated indices / ids")
    p.add_argument("--name", default=None)
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_train_joint)

    p = sub.add_parser("embed", parents=[common], help="extract the task embedding matrix")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--normalize", action="store_true", help="scale rows to unit length")
    p.add_argument("--pca", type=int, default=2)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("cluster", parents=[common], help="group tasks")
    p.add_argument("--algo", choices=C.ALGORITHMS, default="kmeans")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--k-sweep", default=None, help="LO:HI inclusive, e.g. 2:10")
    p.add_argument("--key", default=None, help="metadata key for --algo metadata")
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--min-pts", type=int, default=2)
    p.add_argument("--sparsity", type=float, default=0.1)
    p.add_argument("--embedding", default=None)
    p.add_argument("--dataset", default=None)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train-groups", parents=[common], help="train every group from scratch and score it")
    p.add_argument("--grouping", default=None)
    p.add_argument("--mode", choices=("grouping", "stl", "smtl"), default="grouping")
    p.add_argument("--method", default=None, help="method tag for the score table")
    p.add_argument("--workers", type=int, default=1)
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_train_groups)

    p = sub.add_parser("report", parents=[common], help="compare methods")
    p.add_argument("--scores", nargs="*", default=None)
    p.add_argument("--reference", default="KMTL")
    p.add_argument("--strata", default=None, help="comma-separated metadata keys")
    p.add_argument("--dataset", default=None)
    p.set_defaults(func=cmd_report)
    return ap


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        cfg = json.loads(path.read_text())
        sub = ap._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        defaults = {}
        # top-level keys apply where the command has that option; section keys must match
        for k, v in cfg.items():
            if not isinstance(v, dict) and k.replace("-", "_") in known:
                defaults[k.replace("-", "_")] = v
        for k, v in cfg.get(args.command, {}).items():
            if k.replace("-", "_") not in known:
                raise InputError(f"config key {k!r} is not an option of {args.command}")
            defaults[k.replace("-", "_")] = v
        if "out_dir" in defaults:
            defaults["out_dir"] = Path(defaults["out_dir"])
        sub.set_defaults(**defaults)
        args = ap.parse_args(argv)
    return args


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.out_dir.mkdir(parents=True, exist_ok=True)
        args.func(args, RunManifest(args.out_dir))
        return 0
    except CLIError as e:
        category, msg = e.category, str(e)
    except FileNotFoundError as e:
        category, msg = "input", str(e)
    except D.DataFormatError as e:
        category, msg = "data_format", str(e)
    except TR.TrainingDivergedError as e:
        category, msg = "training_diverged", str(e)
    except TR.LRSearchError as e:
        category, msg = "lr_search", str(e)
    except C.ClusteringError as e:
        category, msg = "clustering", str(e)
    except ZeroDivisionError as e:
        category, msg = "report", str(e)
    except (ValueError, KeyError, M.ModelSpecError) as e:
        category, msg = "invalid_argument", str(e)
    print(f"error[{category}]: {' '.join(msg.split())}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
