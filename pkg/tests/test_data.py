import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from taskgroup import data as D
from oracles import overlap_labels


def genome_of(rng, lengths):
    return {c: rng.integers(0, 4, n).astype(np.uint8) for c, n in lengths.items()}


def single_task(genome, intervals, **kw):
    ps = D.PeakSet("t")
    for chrom, s, e in intervals:
        ps.add(chrom, s, e)
    kw.setdefault("window", 201)
    return D.tile_and_label(genome, [ps], **kw)


# ---------------------------------------------------------------- encoding

def test_one_hot_examples():
    np.testing.assert_array_equal(D.one_hot("A")[:, 0], [1, 0, 0, 0])
    np.testing.assert_array_equal(D.one_hot("n")[:, 0], [0.25] * 4)
    np.testing.assert_array_equal(D.one_hot("ACGT"), np.eye(4))
    np.testing.assert_array_equal(D.one_hot("acgt"), np.eye(4))


def test_one_hot_bad_char_position():
    with pytest.raises(D.SequenceError) as exc:
        D.one_hot("ACGXT")
    assert exc.value.position == 3 and exc.value.char == "X"


@given(st.text(alphabet="ACGTNacgtn", min_size=1, max_size=50))
def test_one_hot_columns_sum_to_one(s):
    np.testing.assert_allclose(D.one_hot(s).sum(0), 1.0)


# ---------------------------------------------------------------- labeling

def test_overlap_boundary_examples():
    g = {"chr1": np.zeros(2000, np.uint8)}
    ds = single_task(g, [("chr1", 150, 260)])
    assert 200 in ds.starts.tolist()                       # overlap 60
    ds = single_task(g, [("chr1", 351, 420)])
    assert 200 not in ds.starts.tolist()                   # overlap 49
    ds = single_task(g, [("chr1", 350, 420)])
    assert 200 in ds.starts.tolist()                       # overlap 50


def test_all_negative_bins_excluded():
    g = {"chr1": np.zeros(3000, np.uint8)}
    a, b = D.PeakSet("a"), D.PeakSet("b")
    a.add("chr1", 400, 600)
    b.add("chr1", 1000, 1100)
    ds = D.tile_and_label(g, [a, b], window=201)
    assert ds.starts.tolist() == [400, 1000]
    assert ds.labels.tolist() == [[1, 0], [0, 1]]
    assert ds.labels.any(1).all()


def test_window_centered_and_edges_dropped():
    rng = np.random.default_rng(0)
    g = genome_of(rng, {"chr1": 4000})
    ds = single_task(g, [("chr1", 0, 4000)], window=1001)
    flank = (1001 - 200) // 2
    assert ds.starts.min() - flank >= 0 and ds.starts.max() - flank + 1001 <= 4000
    for s, codes in zip(ds.starts, ds.codes):
        np.testing.assert_array_equal(codes, g["chr1"][s - flank:s - flank + 1001])
        np.testing.assert_array_equal(codes[flank:flank + 200], g["chr1"][s:s + 200])


def test_labeling_independent_of_order_and_merging():
    rng = np.random.default_rng(1)
    g = genome_of(rng, {"chr1": 20_000})
    ivs = [("chr1", int(s), int(s + rng.integers(1, 300))) for s in rng.integers(0, 19_000, 80)]
    base = single_task(g, ivs)
    shuffled = single_task(g, [ivs[i] for i in rng.permutation(len(ivs))])
    union = D.PeakSet("t", {"chr1": [iv[1:] for iv in ivs]}).merged("chr1")
    merged = single_task(g, [("chr1", int(s), int(e)) for s, e in union])
    for other in (shuffled, merged):
        np.testing.assert_array_equal(base.starts, other.starts)
        np.testing.assert_array_equal(base.labels, other.labels)


def test_bin_overlaps_against_oracle_10000_bins():
    rng = np.random.default_rng(7)
    nbins, bin_size = 10_000, 200
    for task in range(3):
        raw = [(int(s), int(s + rng.integers(1, 700))) for s in rng.integers(0, nbins * bin_size - 1, 2500)]
        ps = D.PeakSet(str(task), {"c": raw})
        cover = D.bin_overlaps(ps.merged("c"), nbins, bin_size)
        starts = np.arange(nbins) * bin_size
        expected = overlap_labels(starts, bin_size, [(s, min(e, nbins * bin_size)) for s, e in raw], 50)
        np.testing.assert_array_equal(cover >= 50, expected)


def test_unknown_chromosome_and_bad_peak_lines(tmp_path):
    with pytest.raises(D.DataFormatError, match="chrZ"):
        single_task({"chr1": np.zeros(1000, np.uint8)}, [("chrZ", 1, 10)])
    bed = tmp_path / "p.bed"
    bed.write_text("chr1\t10\t20\nchr1\t30\n")
    with pytest.raises(D.DataFormatError, match=":2:"):
        D.read_peaks(bed)
    bed.write_text("chr1\t10\t20\nchr1\t50\t40\n")
    with pytest.raises(D.DataFormatError, match=":2:"):
        D.read_peaks(bed)


# ---------------------------------------------------------------- splits

def fake_dataset(chroms, chrom_index, starts):
    n = len(starts)
    return D.TaskDataset(codes=np.zeros((n, 5), np.uint8), labels=np.ones((n, 1), np.uint8),
                         splits=np.zeros(n, np.uint8), chrom_index=np.asarray(chrom_index, np.int32),
                         starts=np.asarray(starts, np.int64), chroms=chroms, task_ids=["t"],
                         task_metadata=[{}])


def test_split_examples():
    ds = D.split_by_region(fake_dataset(["chr1", "chr7", "chr8"], [2, 1, 0, 1], [1000, 20_000_000, 5, 40_000_000]))
    assert ds.splits.tolist() == [D.TEST, D.VALIDATION, D.TRAIN, D.TRAIN]


def test_split_membership_against_oracle():
    rng = np.random.default_rng(3)
    chroms = [f"chr{i}" for i in range(1, 12)]
    ci = rng.integers(0, len(chroms), 10_000)
    starts = rng.integers(0, 50_000_000, 10_000) // 200 * 200
    starts[:200] = [16_059_400, 16_059_401, 16_059_600, 32_570_400, 32_570_401, 32_570_200] * 33 + [0, 0]
    ci[:200] = chroms.index("chr7")
    ds = D.split_by_region(fake_dataset(chroms, ci, starts))
    for c, s, got in zip(ci, starts, ds.splits):
        name = chroms[c]
        want = D.TEST if name in ("chr8", "chr9") else \
            D.VALIDATION if name == "chr7" and 16_059_401 <= s < 32_570_401 else D.TRAIN
        assert got == want
    assert set(np.unique(ds.splits)) == {D.TRAIN, D.VALIDATION, D.TEST}


def test_split_overlapping_regions_rejected():
    with pytest.raises(ValueError, match="overlaps"):
        D.split_by_region(fake_dataset(["chr8"], [0], [0]), validation_region=("chr8", 0, 100))


# ---------------------------------------------------------------- files

def write_inputs(tmp_path, rng):
    g = genome_of(rng, {"chr1": 6000, "chr7": 4000, "chr8": 3000})
    with open(tmp_path / "g.fa", "w") as fh:
        for c, codes in g.items():
            s = "".join("ACGT"[x] for x in codes)
            s = s[:500] + "N" * 10 + s[510:]
            fh.write(f">{c} description\n")
            for i in range(0, len(s), 60):
                fh.write(s[i:i + 60] + "\n")
    rows = ["task_id\tpeak_path\tmodality"]
    for t, mod in enumerate(["dnase", "tf", "tf"]):
        lines = [f"{c}\t{s}\t{s + int(rng.integers(20, 400))}" for c in g
                 for s in rng.integers(0, len(g[c]) - 500, 15)]
        (tmp_path / f"p{t}.bed").write_text("\n".join(lines) + "\n")
        rows.append(f"task{t}\tp{t}.bed\t{mod}")
    (tmp_path / "manifest.tsv").write_text("\n".join(rows) + "\n")
    return g


def test_ingest_and_round_trip(tmp_path):
    write_inputs(tmp_path, np.random.default_rng(5))
    ds = D.ingest(tmp_path / "g.fa", tmp_path / "manifest.tsv", window=401,
                  validation_region=("chr7", 1000, 3000))
    ds.validate()
    assert ds.task_ids == ["task0", "task1", "task2"]
    assert D.metadata_values(ds, "modality") == ["dnase", "tf", "tf"]
    assert (ds.codes == D.N_CODE).any()
    counts = D.split_counts(ds)
    assert sum(counts.values()) == ds.num_examples and all(counts.values())
    D.save_dataset(ds, tmp_path / "d.bin")
    assert (tmp_path / "d.bin").read_bytes()[:8] == D.DATASET_MAGIC
    back = D.load_dataset(tmp_path / "d.bin")
    for f in ("codes", "labels", "splits", "chrom_index", "starts"):
        np.testing.assert_array_equal(getattr(ds, f), getattr(back, f))
    assert (back.task_ids, back.task_metadata, back.chroms) == (ds.task_ids, ds.task_metadata, ds.chroms)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.tsv"):
        D.read_manifest(tmp_path / "nope.tsv")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_pack_round_trip(tmp_path_factory, n, length, seed):
    rng = np.random.default_rng(seed)
    ds = fake_dataset(["c"], np.zeros(n), np.arange(n) * 200)
    ds.codes = rng.integers(0, 5, (n, length)).astype(np.uint8)
    ds.labels = rng.integers(0, 2, (n, 11)).astype(np.uint8)
    ds.labels[:, 0] = 1
    ds.task_ids = [f"t{i}" for i in range(11)]
    ds.task_metadata = [{} for _ in range(11)]
    ds.splits = rng.integers(0, 3, n).astype(np.uint8)
    path = tmp_path_factory.mktemp("pack") / "x"
    D.save_dataset(ds, path)
    back = D.load_dataset(path)
    np.testing.assert_array_equal(back.codes, ds.codes)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.splits, ds.splits)
