import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamtrack.dataset import (ClusterConfig, Dataset, InstanceRecord, IntegrityError,
                               LeakageError, ParseError, beam_std, beam_stds, check_disjoint,
                               cluster_by_std, csv_header, ingest_viwi_csv, read_feature_file,
                               safe_cut_points, snap_cuts, split_leakage_free, split_manifest,
                               union, write_feature_file, write_feature_store, write_viwi_csv)

from conftest import make_dataset


def seq_dataset(n, tau=2, name="d", start=0):
    """n records whose images are unique per row, so every cut is leak-free."""
    beams = [[(start + i) % 16] * tau for i in range(n)]
    return make_dataset(beams, name=name)


def test_record_invariants():
    with pytest.raises(ValueError):
        InstanceRecord([1, 2], ["a"], [1])
    r = InstanceRecord([1, 2, 3], ["a", "b", "c"], [4, 5])
    assert (r.tau, r.m) == (3, 2)


@pytest.mark.parametrize("beams,expected", [
    ([5] * 8, 0.0),
    ([1, 2] * 4, 0.5),
    ([0] * 7 + [8], 7 ** 0.5),
])
def test_beam_std_examples(beams, expected):
    assert beam_std(beams) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 127), min_size=1, max_size=12), st.integers(-50, 50),
       st.randoms())
def test_beam_std_invariances(beams, shift, rnd):
    s = beam_std(beams)
    perm = list(beams)
    rnd.shuffle(perm)
    assert beam_std(perm) == pytest.approx(s, abs=1e-9)
    assert beam_std([b + shift for b in beams]) == pytest.approx(s, abs=1e-9)


def test_cluster_examples():
    d = make_dataset([[3] * 8, [1, 2] * 4, [0, 4] * 4, [0, 5] * 4])
    # stds: 0, 0.5, 2.0 (boundary stays in B), 2.5
    a, b, c = cluster_by_std(d)
    assert [len(a), len(b), len(c)] == [1, 2, 1]
    assert beam_stds(b).tolist() == [0.5, 2.0]


def test_cluster_config_validation():
    with pytest.raises(ValueError):
        ClusterConfig((2.0, 1.0))
    with pytest.raises(ValueError):
        ClusterConfig((-1.0, 1.0))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.integers(0, 9), min_size=4, max_size=4), min_size=1, max_size=30))
def test_clusters_partition(rows):
    d = make_dataset(rows)
    parts = cluster_by_std(d, ClusterConfig((0.5, 2.0)))
    assert sum(len(p) for p in parts) == len(d)
    for p, lo, hi in zip(parts, (-1, 0.5, 2.0), (0.5, 2.0, np.inf)):
        s = beam_stds(p)
        assert np.all((s > lo) & (s <= hi))


def test_csv_roundtrip(tmp_path):
    d = make_dataset([[1, 2, 3], [4, 5, 6], [7, 8, 9]], dims=(2, 2, 1))
    write_viwi_csv(d, tmp_path / "d.csv")
    write_feature_store(d, tmp_path / "feat")
    back = ingest_viwi_csv(tmp_path / "d.csv", tmp_path / "feat")
    assert len(back) == 3
    assert np.array_equal(back.beams, d.beams) and np.array_equal(back.labels, d.labels)
    for i in d.image_ids:
        np.testing.assert_array_equal(back.feature_map(i), d.feature_map(i))
    assert back.image_set() == d.image_set()


def test_csv_headerless_arity_error(tmp_path):
    good = ",".join(f"{k},img{k}" for k in range(8)) + ",1,2,3,4,5"
    bad = ",".join(f"{k},img{k}" for k in range(7)) + ",1,2,3,4,5"
    (tmp_path / "x.csv").write_text(good + "\n" + bad + "\n")
    with pytest.raises(ParseError, match="row 2"):
        ingest_viwi_csv(tmp_path / "x.csv")


def test_csv_empty_file(tmp_path):
    (tmp_path / "e.csv").write_text("")
    assert len(ingest_viwi_csv(tmp_path / "e.csv")) == 0


def test_csv_missing_feature_skips_row(tmp_path, caplog):
    d = make_dataset([[1, 2], [3, 4]], dims=(1, 1, 1))
    write_viwi_csv(d, tmp_path / "d.csv")
    write_feature_store(d, tmp_path / "feat")
    (tmp_path / "feat" / f"{d.image_ids[0]}.feat").unlink()
    back = ingest_viwi_csv(tmp_path / "d.csv", tmp_path / "feat")
    assert len(back) == 1 and back.beams.tolist() == [[3, 4]]
    assert "unresolved" in caplog.text


def test_csv_header_layout():
    assert csv_header(2, 1) == ["beam_1", "img_1", "beam_2", "img_2", "label_1", "user_id", "t"]


def test_feature_file_formats(tmp_path):
    t = np.arange(24, dtype=np.float32).reshape(2, 3, 4) / 7
    write_feature_file(tmp_path / "a.feat", t)
    np.testing.assert_array_equal(read_feature_file(tmp_path / "a.feat"), t)
    np.save(tmp_path / "b.npy", t)
    np.testing.assert_array_equal(read_feature_file(tmp_path / "b.npy"), t)
    raw = (tmp_path / "a.feat").read_bytes()
    assert raw.split(b"\n", 1)[0] == b'{"dims": [2, 3, 4], "dtype": "float32"}'


def test_union_identity_and_conflict():
    a = make_dataset([[1, 2]], name="a")
    empty = Dataset.empty(tau=2)
    u = union(a, empty)
    assert np.array_equal(u.beams, a.beams) and u.image_set() == a.image_set()
    b = make_dataset([[3, 4]], image_rows=[a.records[0].features], name="b", feature_seed=1)
    with pytest.raises(IntegrityError):
        union(a, b)
    same = make_dataset([[3, 4]], image_rows=[a.records[0].features], name="b")
    assert len(union(a, same).image_ids) == 2


def test_union_of_clusters_restores_dataset():
    d = make_dataset([[3] * 4, [1, 2, 1, 2], [0, 9, 0, 9], [5] * 4])
    u = union(*cluster_by_std(d))
    key = lambda ds: sorted(map(tuple, ds.beams.tolist()))  # noqa: E731
    assert key(u) == key(d)


def test_split_sizes_and_manifest():
    dt, dv = seq_dataset(20, name="t"), seq_dataset(10, name="v")
    s = split_leakage_free(dt, dv, (5, 15), (3, 7))
    assert (len(s.train), len(s.val1), len(s.val2)) == (14, 8, 8)
    assert len(s.train) + len(s.val1) + len(s.val2) == 30
    m = split_manifest(20, 10, (5, 15), (3, 7))
    assert m["D_t"]["train_source"] == list(range(5, 15))
    assert m["D_v2"]["val_source"] == list(range(7, 10))


def test_split_degenerate_cuts():
    dt, dv = seq_dataset(6, name="t"), seq_dataset(4, name="v")
    s = split_leakage_free(dt, dv, (0, 6), (0, 4))
    assert (len(s.train), len(s.val1), len(s.val2)) == (10, 0, 0)


def test_split_bad_cuts():
    dt, dv = seq_dataset(6, name="t"), seq_dataset(4, name="v")
    with pytest.raises(IndexError):
        split_leakage_free(dt, dv, (3, 2), (0, 4))
    with pytest.raises(IndexError):
        split_leakage_free(dt, dv, (0, 7), (0, 4))


def test_split_detects_spanning_image():
    imgs = [["x0", "shared"], ["shared", "x2"], ["x3", "x4"]]
    dt = make_dataset([[1, 1], [2, 2], [3, 3]], image_rows=imgs, name="t")
    dv = seq_dataset(4, name="v")
    with pytest.raises(LeakageError) as ei:
        split_leakage_free(dt, dv, (1, 3), (1, 3))
    assert ei.value.image_ids == ["shared"]


def test_check_disjoint_ok():
    check_disjoint({"a": seq_dataset(3, name="a"), "b": seq_dataset(3, name="b")})


def test_safe_cuts_and_snap():
    imgs = [["a", "b"], ["b", "c"], ["d", "e"], ["e", "f"], ["g", "h"]]
    d = make_dataset([[0, 0]] * 5, image_rows=imgs)
    assert safe_cut_points(d).tolist() == [0, 2, 4, 5]
    assert snap_cuts(d, (0.4, 0.8)) == (2, 4)


def test_take_prunes_vocabulary():
    d = seq_dataset(5)
    sub = d.take([1, 3])
    assert len(sub.image_ids) == 4 and sub.feature_maps.shape[0] == 4
    np.testing.assert_array_equal(sub.feature_map(sub.image_ids[0]), d.feature_map(sub.image_ids[0]))


def test_truncate_keeps_recent():
    d = make_dataset([[1, 2, 3, 4]])
    t = d.truncate(2)
    assert t.beams.tolist() == [[3, 4]] and len(t.image_ids) == 2
    with pytest.raises(ValueError):
        d.truncate(5)


def test_arrays_read_only():
    d = seq_dataset(2)
    with pytest.raises(ValueError):
        d.beams[0, 0] = 3
