"""Genome tiling, peak-overlap labeling, region splits and the packed dataset file.

Coordinates are 0-based half-open (BED convention). Sequences are held as
uint8 codes (A=0, C=1, G=2, T=3, N=4) and expanded to one-hot only per batch.

Packed dataset layout (little-endian)::

    bytes 0-7   magic b"TGDATA01"
    uint32      header length H
    H bytes     UTF-8 JSON header (n, window_length, task_ids, task_metadata,
                chroms, bin_size, meta)
    n * ceil(T/8)   label bitsets, one row per example (numpy packbits order)
    n               split codes (0 train, 1 validation, 2 test)
    n * int32       chromosome index into header "chroms"
    n * int64       bin start
    n * ceil(L/4)   2-bit sequence codes, 4 bases per byte, first base in the low bits
    n * ceil(L/8)   N-mask bitsets (bases stored as 0 where masked)
"""
from __future__ import annotations

import csv
import json
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

ALPHABET = "ACGT"
N_CODE = 4
TRAIN, VALIDATION, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VALIDATION: "validation", TEST: "test"}
DATASET_MAGIC = b"TGDATA01"

# defaults for real genomic data
BIN_SIZE = 200
WINDOW = 1001
MIN_OVERLAP = 50
TEST_CHROMS = ("chr8", "chr9")
VALIDATION_REGION = ("chr7", 16_059_401, 32_570_401)

_LOOKUP = np.full(256, 255, dtype=np.uint8)
for _i, _ch in enumerate("ACGTN"):
    _LOOKUP[ord(_ch)] = _i
    _LOOKUP[ord(_ch.lower())] = _i

_ONEHOT_TABLE = np.array(
    [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1], [0.25, 0.25, 0.25, 0.25]],
    dtype=np.float32,
)


class DataFormatError(ValueError):
    pass


class SequenceError(ValueError):
    def __init__(self, char: str, position: int):
        super().__init__(f"invalid base {char!r} at position {position}")
        self.char = char
        self.position = position


def encode(seq: str | bytes) -> np.ndarray:
    raw = np.frombuffer(seq.encode("ascii", "replace") if isinstance(seq, str) else seq, dtype=np.uint8)
    codes = _LOOKUP[raw]
    bad = np.flatnonzero(codes == 255)
    if bad.size:
        pos = int(bad[0])
        ch = seq[pos] if isinstance(seq, str) else chr(seq[pos])
        raise SequenceError(ch, pos)
    return codes


def codes_to_onehot(codes: np.ndarray) -> np.ndarray:
    """[..., L] codes -> [..., 4, L] float32; N becomes 0.25 in every channel."""
    return np.moveaxis(_ONEHOT_TABLE[codes], -1, -2)


def one_hot(seq: str) -> np.ndarray:
    """4 x L encoding in A, C, G, T channel order."""
    return codes_to_onehot(encode(seq))


# ----------------------------------------------------------------------------
# input files
# ----------------------------------------------------------------------------

def read_fasta(path: str | Path) -> dict[str, np.ndarray]:
    genome: dict[str, list[bytes]] = {}
    current = None
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith(b">"):
                current = line[1:].split()[0].decode()
                genome[current] = []
            elif current is None:
                raise DataFormatError(f"{path}:{lineno}: sequence data before first header")
            else:
                genome[current].append(line)
    out = {}
    for name, chunks in genome.items():
        try:
            out[name] = encode(b"".join(chunks))
        except SequenceError as e:
            raise DataFormatError(f"{path}: chromosome {name}: {e}") from None
    return out


@dataclass
class PeakSet:
    task_id: str
    intervals: dict[str, list[tuple[int, int]]] = field(default_factory=dict)

    def add(self, chrom: str, start: int, end: int) -> None:
        self.intervals.setdefault(chrom, []).append((start, end))

    def merged(self, chrom: str) -> np.ndarray:
        """Union of intervals on ``chrom`` as a sorted, non-overlapping [k, 2] array."""
        ivs = sorted(self.intervals.get(chrom, ()))
        out: list[list[int]] = []
        for s, e in ivs:
            if out and s <= out[-1][1]:
                out[-1][1] = max(out[-1][1], e)
            else:
                out.append([s, e])
        return np.array(out, dtype=np.int64).reshape(-1, 2)


def read_peaks(path: str | Path, task_id: str | None = None) -> PeakSet:
    """Parse a BED-like file (>= 3 tab/space separated columns)."""
    peaks = PeakSet(task_id or Path(path).stem)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith(("#", "track", "browser")):
                continue
            cols = line.split()
            if len(cols) < 3:
                raise DataFormatError(f"{path}:{lineno}: expected at least 3 columns, got {len(cols)}")
            try:
                start, end = int(cols[1]), int(cols[2])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-integer coordinates") from None
            if start < 0 or start >= end:
                raise DataFormatError(f"{path}:{lineno}: need 0 <= start < end, got {start}, {end}")
            peaks.add(cols[0], start, end)
    return peaks


@dataclass
class ManifestEntry:
    task_id: str
    peak_path: Path
    tags: dict[str, str]


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """Tab-separated with a header; ``task_id`` and ``peak_path`` required, other columns become tags.

    Relative peak paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader((l for l in fh if not l.startswith("#")), delimiter="\t")
        if not reader.fieldnames or not {"task_id", "peak_path"} <= set(reader.fieldnames):
            raise DataFormatError(f"{path}: header must contain task_id and peak_path")
        entries = []
        for row in reader:
            p = Path(row["peak_path"])
            if not p.is_absolute():
                p = path.parent / p
            tags = {k: v for k, v in row.items() if k not in ("task_id", "peak_path") and v is not None}
            entries.append(ManifestEntry(row["task_id"], p, tags))
    ids = [e.task_id for e in entries]
    if len(set(ids)) != len(ids):
        raise DataFormatError(f"{path}: duplicate task ids")
    return entries


# ----------------------------------------------------------------------------
# dataset
# ----------------------------------------------------------------------------

@dataclass
class TaskDataset:
    codes: np.ndarray            # [N, L] uint8
    labels: np.ndarray           # [N, T] uint8
    splits: np.ndarray           # [N] uint8
    chrom_index: np.ndarray      # [N] int32
    starts: np.ndarray           # [N] int64, bin start
    chroms: list[str]
    task_ids: list[str]
    task_metadata: list[dict[str, str]]
    bin_size: int = BIN_SIZE
    meta: dict = field(default_factory=dict)

    @property
    def num_examples(self) -> int:
        return len(self.labels)

    @property
    def num_tasks(self) -> int:
        return self.labels.shape[1]

    @property
    def window_length(self) -> int:
        return self.codes.shape[1]

    def split_indices(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def onehot(self, idx: np.ndarray) -> np.ndarray:
        return codes_to_onehot(self.codes[idx])

    def task_index(self, task: str | int) -> int:
        if isinstance(task, (int, np.integer)):
            if not 0 <= task < self.num_tasks:
                raise IndexError(f"task index {task} out of range")
            return int(task)
        return self.task_ids.index(task)

    def validate(self) -> None:
        n = self.num_examples
        if not (len(self.codes) == len(self.splits) == len(self.chrom_index) == len(self.starts) == n):
            raise DataFormatError("dataset arrays disagree on example count")
        if n and not self.labels.any(axis=1).all():
            raise DataFormatError("dataset contains examples with no positive label")
        if not np.isin(self.splits, (TRAIN, VALIDATION, TEST)).all():
            raise DataFormatError("unknown split code")
        if len(self.task_ids) != self.num_tasks or len(self.task_metadata) != self.num_tasks:
            raise DataFormatError("task ids / metadata do not match label columns")


def bin_overlaps(merged: np.ndarray, num_bins: int, bin_size: int) -> np.ndarray:
    """Base pairs of each bin [b*bin, (b+1)*bin) covered by non-overlapping intervals."""
    cover = np.zeros(num_bins, dtype=np.int64)
    if len(merged) == 0 or num_bins == 0:
        return cover
    s, e = merged[:, 0], np.minimum(merged[:, 1], num_bins * bin_size)
    keep = s < e
    s, e = s[keep], e[keep]
    b0, b1 = s // bin_size, (e - 1) // bin_size
    same = b0 == b1
    np.add.at(cover, b0[same], e[same] - s[same])
    d0, d1, ds, de = b0[~same], b1[~same], s[~same], e[~same]
    np.add.at(cover, d0, (d0 + 1) * bin_size - ds)
    np.add.at(cover, d1, de - d1 * bin_size)
    # bins strictly between b0 and b1 are fully covered
    full = np.zeros(num_bins + 1, dtype=np.int64)
    np.add.at(full, d0 + 1, 1)
    np.add.at(full, d1, -1)
    cover += np.cumsum(full)[:num_bins] * bin_size
    return cover


def tile_and_label(genome: Mapping[str, np.ndarray], peaks: Sequence[PeakSet],
                   bin_size: int = BIN_SIZE, window: int = WINDOW, min_overlap: int = MIN_OVERLAP,
                   task_metadata: Sequence[Mapping[str, str]] | None = None) -> TaskDataset:
    """Tile every chromosome into bins and label each bin per task by peak overlap.

    A bin is positive for a task when the union of that task's peaks covers at
    least ``min_overlap`` bp of it. Bins negative for every task and bins whose
    centered window runs past a chromosome end are dropped. All examples start
    in the train split.
    """
    if window % 2 == 0 or window < bin_size:
        raise ValueError(f"window must be odd and >= bin size, got {window}")
    for ps in peaks:
        for chrom, ivs in ps.intervals.items():
            if chrom not in genome:
                raise DataFormatError(f"task {ps.task_id}: unknown chromosome {chrom!r}")
            length = len(genome[chrom])
            worst = max(e for _, e in ivs)
            if worst > length:
                raise DataFormatError(
                    f"task {ps.task_id}: interval end {worst} beyond {chrom} length {length}")

    flank = (window - bin_size) // 2
    chroms = list(genome)
    all_codes, all_labels, all_chrom, all_start = [], [], [], []
    for ci, chrom in enumerate(chroms):
        seq = genome[chrom]
        nbins = len(seq) // bin_size
        if nbins == 0:
            continue
        labels = np.zeros((nbins, len(peaks)), dtype=np.uint8)
        for t, ps in enumerate(peaks):
            labels[:, t] = bin_overlaps(ps.merged(chrom), nbins, bin_size) >= min_overlap
        starts = np.arange(nbins, dtype=np.int64) * bin_size
        wstart = starts - flank
        keep = (wstart >= 0) & (wstart + window <= len(seq)) & labels.any(axis=1)
        idx = np.flatnonzero(keep)
        if idx.size == 0:
            continue
        all_codes.append(np.lib.stride_tricks.sliding_window_view(seq, window)[wstart[idx]])
        all_labels.append(labels[idx])
        all_chrom.append(np.full(idx.size, ci, dtype=np.int32))
        all_start.append(starts[idx])

    T = len(peaks)
    if all_codes:
        codes = np.ascontiguousarray(np.concatenate(all_codes))
        labels = np.concatenate(all_labels)
        chrom_index = np.concatenate(all_chrom)
        starts = np.concatenate(all_start)
    else:
        codes = np.zeros((0, window), np.uint8)
        labels = np.zeros((0, T), np.uint8)
        chrom_index = np.zeros(0, np.int32)
        starts = np.zeros(0, np.int64)
    meta = [dict(m) for m in task_metadata] if task_metadata is not None else [{} for _ in peaks]
    return TaskDataset(codes=codes, labels=labels, splits=np.zeros(len(labels), np.uint8),
                       chrom_index=chrom_index, starts=starts, chroms=chroms,
                       task_ids=[p.task_id for p in peaks], task_metadata=meta, bin_size=bin_size,
                       meta={"window": window, "min_overlap": min_overlap})


def split_by_region(dataset: TaskDataset, test_chroms: Iterable[str] = TEST_CHROMS,
                    validation_region: tuple[str, int, int] = VALIDATION_REGION) -> TaskDataset:
    """Assign splits in place by bin start: test chromosomes, a validation interval, train elsewhere."""
    test_chroms = set(test_chroms)
    vchrom, vstart, vend = validation_region
    if vchrom in test_chroms:
        raise ValueError(f"validation region on {vchrom} overlaps test chromosomes {sorted(test_chroms)}")
    if vstart >= vend:
        raise ValueError("validation region is empty")
    names = np.array(dataset.chroms, dtype=object)
    chrom = names[dataset.chrom_index] if dataset.num_examples else np.array([], dtype=object)
    splits = np.full(dataset.num_examples, TRAIN, dtype=np.uint8)
    splits[np.isin(chrom, list(test_chroms))] = TEST
    splits[(chrom == vchrom) & (dataset.starts >= vstart) & (dataset.starts < vend)] = VALIDATION
    dataset.splits = splits
    return dataset


def save_dataset(ds: TaskDataset, path: str | Path) -> None:
    ds.validate()
    n, length = ds.codes.shape
    header = {"n": n, "window_length": length, "task_ids": ds.task_ids,
              "task_metadata": ds.task_metadata, "chroms": ds.chroms, "bin_size": ds.bin_size,
              "meta": ds.meta}
    raw = json.dumps(header, sort_keys=True).encode()
    nmask = ds.codes == N_CODE
    bases = np.where(nmask, 0, ds.codes).astype(np.uint8)
    pad = (-length) % 4
    if pad:
        bases = np.pad(bases, ((0, 0), (0, pad)))
    b = bases.reshape(n, -1, 4)
    packed = (b[..., 0] | (b[..., 1] << 2) | (b[..., 2] << 4) | (b[..., 3] << 6)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(np.packbits(ds.labels.astype(bool), axis=1).tobytes())
        fh.write(ds.splits.astype(np.uint8).tobytes())
        fh.write(ds.chrom_index.astype("<i4").tobytes())
        fh.write(ds.starts.astype("<i8").tobytes())
        fh.write(packed.tobytes())
        fh.write(np.packbits(nmask, axis=1).tobytes())


def load_dataset(path: str | Path) -> TaskDataset:
    data = Path(path).read_bytes()
    if data[:8] != DATASET_MAGIC:
        raise DataFormatError(f"{path}: not a packed dataset (bad magic)")
    (hlen,) = struct.unpack("<I", data[8:12])
    h = json.loads(data[12:12 + hlen])
    n, length, T = h["n"], h["window_length"], len(h["task_ids"])
    off = 12 + hlen

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    lbytes = (T + 7) // 8
    labels = np.unpackbits(take(n * lbytes, "u1").reshape(n, lbytes), axis=1, count=T)
    splits = take(n, "u1").copy()
    chrom_index = take(n, "<i4").astype(np.int32)
    starts = take(n, "<i8").astype(np.int64)
    qbytes = (length + 3) // 4
    packed = take(n * qbytes, "u1").reshape(n, qbytes)
    bases = np.stack([(packed >> s) & 3 for s in (0, 2, 4, 6)], axis=-1).reshape(n, -1)[:, :length]
    mbytes = (length + 7) // 8
    nmask = np.unpackbits(take(n * mbytes, "u1").reshape(n, mbytes), axis=1, count=length).astype(bool)
    if off != len(data):
        raise DataFormatError(f"{path}: trailing bytes")
    codes = np.where(nmask, N_CODE, bases).astype(np.uint8)
    return TaskDataset(codes=np.ascontiguousarray(codes), labels=labels.astype(np.uint8), splits=splits,
                       chrom_index=chrom_index, starts=starts, chroms=h["chroms"], task_ids=h["task_ids"],
                       task_metadata=h["task_metadata"], bin_size=h["bin_size"], meta=h["meta"])


def ingest(fasta: str | Path, manifest: str | Path, bin_size: int = BIN_SIZE, window: int = WINDOW,
           min_overlap: int = MIN_OVERLAP, test_chroms: Iterable[str] = TEST_CHROMS,
           validation_region: tuple[str, int, int] = VALIDATION_REGION) -> TaskDataset:
    entries = read_manifest(manifest)
    genome = read_fasta(fasta)
    peaks = [read_peaks(e.peak_path, e.task_id) for e in entries]
    ds = tile_and_label(genome, peaks, bin_size, window, min_overlap, [e.tags for e in entries])
    return split_by_region(ds, test_chroms, validation_region)


def metadata_values(ds: TaskDataset, key: str) -> list[str]:
    missing = [t for t, m in zip(ds.task_ids, ds.task_metadata) if key not in m]
    if missing:
        raise KeyError(f"metadata key {key!r} missing for tasks {missing[:5]}")
    return [str(m[key]) for m in ds.task_metadata]


def positive_rates(ds: TaskDataset) -> np.ndarray:
    return ds.labels.mean(axis=0)


def split_counts(ds: TaskDataset) -> dict[str, int]:
    counts = defaultdict(int)
    for code, name in SPLIT_NAMES.items():
        counts[name] = int((ds.splits == code).sum())
    return dict(counts)
