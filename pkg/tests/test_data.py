import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deconfrec.data import (SynthSpec, build_sequences, from_records, generate_synthetic,
                            leave_last_out_split, load_interactions, negative_sample,
                            read_samples, subsample_users, synthetic_group_of, write_interactions,
                            write_samples)
from deconfrec.errors import DataError, ParseError
from deconfrec.models import PAD


def test_toy_csv(tmp_path):
    p = tmp_path / "log.csv"
    p.write_text("user,item,timestamp\nu1,a,3\nu2,b,1\nu1,c,2\n")
    lg = load_interactions(p, "csv")
    assert len(lg) == 3 and 1 <= lg.n_users <= 3
    # sorted by (user, time)
    assert [lg.item_ids[i] for i in lg.items] == ["c", "a", "b"]


def test_duplicates_preserved(tmp_path):
    p = tmp_path / "log.csv"
    p.write_text("u1,a,3\nu1,a,3\nu1,b,4\n")
    assert len(load_interactions(p)) == 3


def test_movielens_dat(tmp_path):
    p = tmp_path / "ratings.dat"
    p.write_text("1::1193::5::978300760\n1::661::3::978302109\n2::1193::4::978298413\n")
    lg = load_interactions(p, "movielens-dat")
    assert (len(lg), lg.n_users, lg.n_items) == (3, 2, 2)
    assert np.all(lg.labels == 1)


def test_malformed_line_number(tmp_path):
    p = tmp_path / "ratings.dat"
    p.write_text("1::1193::5::978300760\n1::661::3\n")
    with pytest.raises(ParseError, match="line 2"):
        load_interactions(p, "movielens-dat")
    q = tmp_path / "bad.csv"
    q.write_text("u,i,t\nu1,a,x\n")
    with pytest.raises(ParseError, match="line 2"):
        load_interactions(q)


def test_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(DataError):
        load_interactions(p)


def test_roundtrip_csv(tmp_path, toy_log):
    write_interactions(toy_log, tmp_path / "x.csv")
    back = load_interactions(tmp_path / "x.csv")
    assert np.array_equal(back.timestamps, toy_log.timestamps)
    assert [back.item_ids[i] for i in back.items] == [toy_log.item_ids[i] for i in toy_log.items]


def test_leave_last_out(toy_log):
    split = leave_last_out_split(toy_log)
    a = 0
    assert int(np.sum(split.train.users == a)) == 4
    assert int(np.sum(split.test.users == a)) == 1
    assert split.excluded_users == 1  # single-interaction user c
    assert len(split.test) == 2  # one test record per retained user


def test_trailing_negatives_never_outlive_test():
    recs = [("u", "a", 1, 1), ("u", "b", 2, 1), ("u", "c", 3, 0)]
    split = leave_last_out_split(from_records(recs))
    assert split.train.timestamps.max() <= split.test.timestamps.min()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 15), st.integers(0, 50)),
                min_size=1, max_size=60))
def test_split_is_temporal(recs):
    lg = from_records(recs)
    split = leave_last_out_split(lg)
    for u in np.unique(split.test.users):
        t_test = split.test.timestamps[split.test.users == u].min()
        assert np.all(split.train.timestamps[split.train.users == u] <= t_test)


def test_negative_counts_and_collisions(toy_log):
    split = leave_last_out_split(toy_log)
    lg = from_records([(f"u{k % 3}", f"i{k}", k) for k in range(33)] +
                      [(f"u{k % 3}", f"i{k}", 200 + k) for k in range(33, 200)])
    split = leave_last_out_split(lg)
    ds = negative_sample(split, 4, "ratio-1-to-99", seed=3)
    for u in range(3):
        tr = ds.train.users == u
        n_pos = int(np.sum(ds.train.labels[tr] == 1))
        assert int(np.sum(ds.train.labels[tr] == 0)) == 4 * n_pos
        te = ds.test.users == u
        assert int(np.sum(ds.test.labels[te] == 0)) == 99
        clicked = set(lg.items[lg.users == u].tolist())
        neg = set(ds.train.items[tr & (ds.train.labels == 0)].tolist())
        neg |= set(ds.test.items[te & (ds.test.labels == 0)].tolist())
        assert not neg & clicked
    assert ds.replacement_users == []


def test_small_pool_falls_back_with_flag():
    recs = [("u", f"i{k}", k) for k in range(6)] + [("v", "i0", 1), ("v", "i1", 2)]
    ds = negative_sample(leave_last_out_split(from_records(recs)), 4, "ratio-1-to-99", seed=0)
    assert 1 in ds.replacement_users  # v has only 4 candidates for 99 test negatives
    assert 0 in ds.replacement_users  # u has no candidates


def test_all_negatives_mode():
    recs = [("u", f"i{k}", k) for k in range(3)] + [("v", f"i{k}", k) for k in range(3, 10)]
    ds = negative_sample(leave_last_out_split(from_records(recs)), 1, "all-negatives", seed=0)
    assert int(np.sum((ds.test.users == 0) & (ds.test.labels == 0))) == 7


def test_sampling_deterministic(toy_log):
    split = leave_last_out_split(toy_log)
    a = negative_sample(split, 2, seed=5, test_negatives=3)
    b = negative_sample(split, 2, seed=5, test_negatives=3)
    assert np.array_equal(a.train.items, b.train.items)
    assert np.array_equal(a.test.items, b.test.items)


def test_sequences():
    hist = {0: [10, 11, 12, 13]}
    seqs = build_sequences(hist, [0, 0], [0, 4], L=2)
    assert np.all(seqs[0] == PAD)
    assert seqs[1].tolist() == [12, 13]


def test_sequences_are_causal():
    lg = generate_synthetic(SynthSpec(users_per_group=[6, 3], activeness_ranges=[(3, 5), (8, 12)],
                                      n_items=40, seed=2))
    ds = negative_sample(leave_last_out_split(lg), 2, seed=0, L=50, test_negatives=5)
    for s in (ds.train, ds.test):
        for k in range(len(s)):
            u, ts = s.users[k], s.timestamps[k]
            seq = s.sequences[k][s.sequences[k] != PAD]
            earlier = lg.items[(lg.users == u) & (lg.timestamps < ts)]
            assert set(seq.tolist()) <= set(earlier.tolist())
            if s.labels[k] == 1:
                assert s.items[k] not in seq


def test_samples_roundtrip(tmp_path, toy_log):
    ds = negative_sample(leave_last_out_split(toy_log), 1, seed=0, L=3, test_negatives=1)
    write_samples(ds.train, tmp_path / "s.csv")
    back = read_samples(tmp_path / "s.csv", 3)
    for f in ("users", "items", "labels", "timestamps", "sequences"):
        assert np.array_equal(getattr(back, f), getattr(ds.train, f))


def test_synthetic_deterministic_and_long_tailed():
    spec = SynthSpec(seed=4)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert np.array_equal(a.items, b.items) and np.array_equal(a.timestamps, b.timestamps)
    group = synthetic_group_of(spec)
    per_group = np.bincount([group[u] for u in np.unique(a.users)])[1:]
    assert np.all(np.diff(per_group) <= 0)
    counts = np.bincount(a.users)
    for u, j in group.items():
        lo, hi = spec.activeness_ranges[j - 1]
        assert lo <= counts[u] <= hi


def test_synthetic_infeasible():
    with pytest.raises(ValueError, match="infeasible"):
        generate_synthetic(SynthSpec(users_per_group=[2], activeness_ranges=[(5, 3)]))
    with pytest.raises(ValueError, match="exceeds"):
        generate_synthetic(SynthSpec(users_per_group=[2], activeness_ranges=[(5, 30)],
                                     n_items=10))


def test_subsample_users(toy_log):
    sub = subsample_users(toy_log, 2, seed=0)
    assert len(np.unique(sub.users)) == 2
    assert subsample_users(toy_log, 10, seed=0) is toy_log
