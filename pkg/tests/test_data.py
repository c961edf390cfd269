import numpy as np
import pytest

from minicil import data as dt
from minicil.errors import ContractError, ParseError


def small_spec(**kw):
    base = dict(base_classes=3, cil_classes=8, input_dim=16, clusters_per_class=2,
                cluster_std=0.5, separation=8.0, train_per_class=12, test_per_class=6,
                drift_intensity=0.5)
    base.update(kw)
    return dt.SyntheticSpec(**base)


def test_generation_deterministic():
    a = dt.generate_synthetic(small_spec(), seed=5)
    b = dt.generate_synthetic(small_spec(), seed=5)
    assert a.base.x.tobytes() == b.base.x.tobytes()
    assert a.cil.train.x.tobytes() == b.cil.train.x.tobytes()
    assert a.cil.test.x.tobytes() == b.cil.test.x.tobytes()
    c = dt.generate_synthetic(small_spec(), seed=6)
    assert a.cil.train.x.tobytes() != c.cil.train.x.tobytes()


def test_generation_counts_match_spec():
    spec = small_spec()
    out = dt.generate_synthetic(spec, seed=1)
    assert len(out.base) == spec.base_classes * spec.train_per_class
    assert len(out.cil.train) == spec.cil_classes * spec.train_per_class
    assert len(out.cil.test) == spec.cil_classes * spec.test_per_class
    for c in out.cil.train.classes():
        assert (out.cil.train.y == c).sum() == spec.train_per_class
        assert (out.cil.test.y == c).sum() == spec.test_per_class


def test_base_and_cil_labels_disjoint():
    out = dt.generate_synthetic(small_spec(), seed=2)
    assert not set(out.base.classes()) & set(out.cil.train.classes())


def test_high_separation_gives_near_perfect_1nn():
    spec = small_spec(separation=30.0, cluster_std=0.5, train_per_class=20,
                      test_per_class=10)
    out = dt.generate_synthetic(spec, seed=3)
    train, test = out.cil.train, out.cil.test
    d2 = (np.square(test.x).sum(1)[:, None] + np.square(train.x).sum(1)[None, :]
          - 2 * test.x @ train.x.T)
    preds = train.y[d2.argmin(axis=1)]
    assert float(np.mean(preds == test.y)) >= 0.99


def test_generation_rejects_bad_separation():
    with pytest.raises(ContractError):
        small_spec(separation=0.0)


def test_split_single_session_holds_everything():
    out = dt.generate_synthetic(small_spec(), seed=4)
    stream = dt.split_cil(out.cil, 1, class_order_seed=0)
    assert len(stream) == 1
    assert set(stream.sessions[0].labels) == set(out.cil.train.classes())


def test_split_one_class_per_session():
    out = dt.generate_synthetic(small_spec(), seed=5)
    stream = dt.split_cil(out.cil, 8, class_order_seed=0)
    assert len(stream) == 8
    assert all(len(s.labels) == 1 for s in stream.sessions)


def test_split_remainder_goes_to_earlier_sessions():
    out = dt.generate_synthetic(small_spec(), seed=6)
    stream = dt.split_cil(out.cil, 3, class_order_seed=0)
    assert [len(s.labels) for s in stream.sessions] == [3, 3, 2]


def test_split_order_seed_contract():
    out = dt.generate_synthetic(small_spec(), seed=7)

    def order(seed):
        return tuple(tuple(s.labels) for s in dt.split_cil(out.cil, 4, seed).sessions)

    assert order(1) == order(1)
    orders = {order(s) for s in (1, 2, 3)}
    assert len(orders) >= 2


def test_split_rejects_too_many_sessions():
    out = dt.generate_synthetic(small_spec(), seed=8)
    with pytest.raises(ContractError):
        dt.split_cil(out.cil, 9, class_order_seed=0)


def test_cumulative_test_is_union():
    out = dt.generate_synthetic(small_spec(), seed=9)
    stream = dt.split_cil(out.cil, 4, class_order_seed=1)
    cum = stream.cumulative_test(2)
    expected = set(stream.sessions[0].labels) | set(stream.sessions[1].labels)
    assert set(cum.classes()) == expected
    assert len(cum) == len(stream.sessions[0].test) + len(stream.sessions[1].test)


def test_session_label_reuse_rejected():
    a = dt.LabeledSet(np.zeros((2, 3)), np.array([1, 1]))
    b = dt.LabeledSet(np.zeros((2, 3)), np.array([1, 1]))
    with pytest.raises(ContractError):
        dt.SessionStream([dt.Session(a, a, (1,)), dt.Session(b, b, (1,))])


# -- few-shot -------------------------------------------------------------------


def test_fewshot_counts_and_untouched_tests():
    out = dt.generate_synthetic(small_spec(), seed=10)
    stream = dt.split_cil(out.cil, 4, class_order_seed=2)
    few = dt.fewshot_subsample(stream, shots=5, from_session=2, seed=3)
    assert len(few.sessions[0].train) == len(stream.sessions[0].train)
    for t in (1, 2, 3):
        s = few.sessions[t]
        for c in s.labels:
            assert (s.train.y == c).sum() == 5
        assert s.test.x.tobytes() == stream.sessions[t].test.x.tobytes()


def test_fewshot_full_count_is_identity():
    out = dt.generate_synthetic(small_spec(), seed=11)
    stream = dt.split_cil(out.cil, 4, class_order_seed=2)
    few = dt.fewshot_subsample(stream, shots=12, from_session=2, seed=4)
    for s_old, s_new in zip(stream.sessions, few.sessions):
        assert np.sort(s_new.train.y).tolist() == np.sort(s_old.train.y).tolist()
        assert len(s_new.train) == len(s_old.train)


def test_fewshot_deterministic():
    out = dt.generate_synthetic(small_spec(), seed=12)
    stream = dt.split_cil(out.cil, 4, class_order_seed=2)
    a = dt.fewshot_subsample(stream, shots=3, seed=9)
    b = dt.fewshot_subsample(stream, shots=3, seed=9)
    for sa, sb in zip(a.sessions, b.sessions):
        assert sa.train.x.tobytes() == sb.train.x.tobytes()


def test_fewshot_rejects_excess_shots():
    out = dt.generate_synthetic(small_spec(), seed=13)
    stream = dt.split_cil(out.cil, 4, class_order_seed=2)
    with pytest.raises(ContractError):
        dt.fewshot_subsample(stream, shots=13)
    with pytest.raises(ContractError):
        dt.fewshot_subsample(stream, shots=0)
    with pytest.raises(ContractError):
        dt.fewshot_subsample(stream, shots=2, from_session=1)


# -- csv round trip ----------------------------------------------------------------


def test_csv_round_trip_equal_stream(tmp_path):
    out = dt.generate_synthetic(small_spec(), seed=14)
    stream = dt.split_cil(out.cil, 4, class_order_seed=3)
    path = tmp_path / "stream.csv"
    dt.export_stream(stream, path)
    loaded = dt.ingest_embeddings(path)
    assert len(loaded) == len(stream)
    for a, b in zip(stream.sessions, loaded.sessions):
        assert a.labels == b.labels
        assert a.train.x.tobytes() == b.train.x.tobytes()
        assert np.array_equal(a.train.y, b.train.y)
        assert a.test.x.tobytes() == b.test.x.tobytes()
        assert np.array_equal(a.test.y, b.test.y)


def test_ingest_three_row_fixture(tmp_path):
    path = tmp_path / "tiny.csv"
    path.write_text(
        "session,split,label,f0,f1\n"
        "1,train,4,0.5,-1.25\n"
        "1,test,4,0.25,0.75\n"
        "2,train,9,1.5,2.5\n"
    )
    stream = dt.ingest_embeddings(path)
    assert len(stream) == 2
    np.testing.assert_array_equal(stream.sessions[0].train.x, [[0.5, -1.25]])
    np.testing.assert_array_equal(stream.sessions[0].test.x, [[0.25, 0.75]])
    assert stream.sessions[1].labels == (9,)


def test_ingest_rejects_label_in_two_sessions(tmp_path):
    path = tmp_path / "dup.csv"
    path.write_text(
        "session,split,label,f0\n"
        "1,train,4,0.5\n"
        "2,train,4,0.25\n"
    )
    with pytest.raises(ContractError, match="more than one session"):
        dt.ingest_embeddings(path)


@pytest.mark.parametrize("row,message", [
    ("1,train,4,0.5", "fields"),          # too few features
    ("1,val,4,0.5,1.0", "split"),         # bad split value
    ("x,train,4,0.5,1.0", "line 2"),      # non-integer session
    ("1,train,4,0.5,oops", "line 2"),     # non-float feature
    ("0,train,4,0.5,1.0", "session"),     # session below 1
])
def test_ingest_rejects_malformed_rows(tmp_path, row, message):
    path = tmp_path / "bad.csv"
    path.write_text("session,split,label,f0,f1\n" + row + "\n")
    with pytest.raises(ParseError, match=message):
        dt.ingest_embeddings(path)


def test_ingest_rejects_bad_header(tmp_path):
    path = tmp_path / "hdr.csv"
    path.write_text("sess,split,label,f0\n1,train,4,0.5\n")
    with pytest.raises(ParseError, match="line 1"):
        dt.ingest_embeddings(path)


def test_ingest_reports_line_numbers(tmp_path):
    path = tmp_path / "line.csv"
    path.write_text(
        "session,split,label,f0\n"
        "1,train,4,0.5\n"
        "1,train,5,abc\n"
    )
    with pytest.raises(ParseError, match="line 3"):
        dt.ingest_embeddings(path)
