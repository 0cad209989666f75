import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from mdsrec.data import (InteractionDataset, ModalFeatureTable, SynthSpec, build_examples, load_interactions,
                         load_modal_features, make_batches, pad_sequences, split_leave_one_out, synth_generate,
                         write_interactions, write_modal_features)
from mdsrec.errors import DataError
from mdsrec.interest import kmeans_cluster


def write_tsv(path, rows):
    path.write_text("".join(f"{u}\t{i}\t{t}\n" for u, i, t in rows), encoding="utf-8")
    return path


def test_shuffled_timestamps_are_sorted(tmp_path):
    path = write_tsv(tmp_path / "log.tsv", [("u", "c", 30), ("u", "a", 10), ("u", "b", 20)])
    ds = load_interactions(path)
    assert ds.item_ids == ["a", "b", "c"]
    assert ds.sequences[0].tolist() == [0, 1, 2]


def test_timestamp_ties_keep_file_order(tmp_path):
    path = write_tsv(tmp_path / "log.tsv", [("u", "b", 5), ("u", "a", 5), ("u", "c", 1)])
    ds = load_interactions(path)
    raw = [ds.item_ids[i] for i in ds.sequences[0]]
    assert raw == ["c", "b", "a"]


def test_short_users_are_dropped_and_counted(tmp_path):
    rows = [("1", "x", 1), ("1", "y", 2), ("2", "x", 1), ("2", "y", 2), ("2", "z", 3)]
    ds = load_interactions(write_tsv(tmp_path / "log.tsv", rows))
    assert ds.n_users == 1 and ds.dropped_users == 1
    assert ds.stats()["dropped_users"] == 1


def test_comments_skipped_and_malformed_row_reports_line(tmp_path):
    path = tmp_path / "log.tsv"
    path.write_text("# header\nu\ta\t1\nu\tb\n", encoding="utf-8")
    with pytest.raises(DataError, match=":3:"):
        load_interactions(path)


def test_empty_result_is_an_error(tmp_path):
    with pytest.raises(DataError):
        load_interactions(write_tsv(tmp_path / "log.tsv", [("u", "a", 1)]))


def test_reindexing_is_a_bijection(tmp_path, rng):
    rows = [(f"u{u}", f"i{rng.integers(40)}", t) for u in range(30) for t in range(5)]
    ds = load_interactions(write_tsv(tmp_path / "log.tsv", rows))
    iidx, uidx = ds.item_index(), ds.user_index()
    assert all(iidx[ds.item_ids[i]] == i for i in range(ds.n_items))
    assert all(uidx[ds.user_ids[u]] == u for u in range(ds.n_users))
    for u in range(ds.n_users):
        decoded = [ds.item_ids[i] for i in ds.sequences[u]]
        assert decoded == [i for uu, i, _ in rows if uu == ds.user_ids[u]]


def test_write_then_load_interactions_round_trip(tmp_path):
    ds, _ = synth_generate(SynthSpec(n_users=20, n_items=15), 3)
    write_interactions(ds, tmp_path / "x.tsv")
    back = load_interactions(tmp_path / "x.tsv")
    assert [s.tolist() for s in back.sequences] == [s.tolist() for s in ds.sequences]


def test_dataset_rejects_out_of_range_items():
    with pytest.raises(DataError):
        InteractionDataset(1, 3, [np.array([0, 1, 3])])


def test_feature_text_all_present(tmp_path):
    (tmp_path / "f.txt").write_text("0\t1 2\n1\t3 4\n2\t5 6\n", encoding="utf-8")
    table = load_modal_features(tmp_path / "f.txt", "visual", n_items=3)
    assert table.rows.shape == (3, 2) and table.missing == []


def test_feature_text_missing_item_zero_filled(tmp_path, caplog):
    (tmp_path / "f.txt").write_text("0\t1 2\n2\t5 6\n", encoding="utf-8")
    with caplog.at_level(logging.WARNING):
        table = load_modal_features(tmp_path / "f.txt", "textual", n_items=3)
    assert table.missing == [1]
    assert np.array_equal(table.rows[1], [0, 0])
    assert "1 items" in caplog.text


def test_feature_width_mismatch_is_an_error(tmp_path):
    (tmp_path / "f.txt").write_text("0\t1 2\n1\t3 4 5\n", encoding="utf-8")
    with pytest.raises(DataError, match=":2:"):
        load_modal_features(tmp_path / "f.txt", "visual", n_items=2)


def test_feature_item_outside_catalog_is_an_error(tmp_path):
    (tmp_path / "f.txt").write_text("7\t1 2\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_modal_features(tmp_path / "f.txt", "visual", n_items=3)
    with pytest.raises(DataError):
        load_modal_features(tmp_path / "f.txt", "visual", item_index={"a": 0})


@pytest.mark.parametrize("fmt", ["binary", "text"])
def test_feature_round_trip_is_bit_identical(tmp_path, rng, fmt):
    table = ModalFeatureTable("visual", rng.standard_normal((9, 4)).astype(np.float32))
    write_modal_features(table, tmp_path / "f", fmt=fmt)
    back = load_modal_features(tmp_path / "f", "visual", n_items=9)
    assert back.rows.tobytes() == table.rows.tobytes()


def test_binary_header_must_match_catalog(tmp_path, rng):
    write_modal_features(ModalFeatureTable("visual", np.ones((4, 2), np.float32)), tmp_path / "f")
    with pytest.raises(DataError, match="declares 4"):
        load_modal_features(tmp_path / "f", "visual", n_items=5)
    assert (tmp_path / "f").read_bytes()[:4] == b"MDSF"


def test_split_four_items():
    s = split_leave_one_out(InteractionDataset(1, 4, [np.array([0, 1, 2, 3])]))
    assert s.train[0].tolist() == [0, 1] and s.valid_target[0] == 2 and s.test_target[0] == 3


def test_split_minimal_and_all_length_three():
    s = split_leave_one_out(InteractionDataset(3, 5, [np.array([0, 1, 2]), np.array([3, 4, 0]), np.array([1, 2, 3])]))
    assert all(len(t) == 1 for t in s.train)
    assert s.train[0].tolist() == [0] and s.valid_target[0] == 1 and s.test_target[0] == 2


@given(st.lists(st.lists(st.integers(0, 9), min_size=3, max_size=12), min_size=1, max_size=8))
def test_split_reassembles_original(seqs):
    ds = InteractionDataset(len(seqs), 10, [np.array(s) for s in seqs])
    split = split_leave_one_out(ds)
    for u, s in enumerate(seqs):
        assert split.full_sequence(u).tolist() == s
        assert len(split.train[u]) >= 1


def test_batch_sizes_two_two_one():
    split = split_leave_one_out(InteractionDataset(5, 6, [np.arange(4) + (u % 2) for u in range(5)]))
    assert [len(b) for b in make_batches(split, 2, 5, mode="test")] == [2, 2, 1]


def test_long_sequence_keeps_most_recent():
    ids, mask = pad_sequences([np.arange(7)], 5, pad_id=99)
    assert ids[0].tolist() == [2, 3, 4, 5, 6] and mask.all()


def test_left_padding_puts_newest_item_last():
    ids, mask = pad_sequences([np.array([4, 5])], 4, pad_id=9)
    assert ids[0].tolist() == [9, 9, 4, 5]
    assert mask[0].tolist() == [False, False, True, True]
    assert np.array_equal(mask, ids != 9)


def test_same_seed_same_batch_order():
    ds, _ = synth_generate(SynthSpec(n_users=40, n_items=20), 0)
    split = split_leave_one_out(ds)
    a = [b.users.tolist() for b in make_batches(split, 7, 10, seed=11)]
    b = [b.users.tolist() for b in make_batches(split, 7, 10, seed=11)]
    c = [b.users.tolist() for b in make_batches(split, 7, 10, seed=12)]
    assert a == b and a != c


def test_eval_epoch_covers_every_user_once():
    ds, _ = synth_generate(SynthSpec(n_users=33, n_items=20), 0)
    split = split_leave_one_out(ds)
    batches = list(make_batches(split, 8, 10, mode="test"))
    users = np.concatenate([b.users for b in batches])
    assert sorted(users.tolist()) == list(range(33))
    targets = np.concatenate([b.targets for b in batches])
    assert np.array_equal(targets, split.test_target)


def test_train_examples_predict_last_train_item():
    split = split_leave_one_out(InteractionDataset(2, 9, [np.array([1, 2, 3, 4, 5]), np.array([6, 7, 8])]))
    users, inputs, targets = build_examples(split, "train")
    assert users.tolist() == [0]
    assert inputs[0].tolist() == [1, 2] and targets.tolist() == [3]
    users, inputs, targets = build_examples(split, "train", prefix_augment=True)
    assert [x.tolist() for x in inputs] == [[1], [1, 2]] and targets.tolist() == [2, 3]
    _, inputs, targets = build_examples(split, "test")
    assert inputs[1].tolist() == [6, 7] and targets[1] == 8


def test_synth_infeasible_spec():
    with pytest.raises(DataError):
        synth_generate(SynthSpec(n_items=3, k_true=4), 0)


def test_synth_same_seed_bit_identical():
    a, fa = synth_generate(SynthSpec(n_users=30, n_items=25), 5)
    b, fb = synth_generate(SynthSpec(n_users=30, n_items=25), 5)
    assert all(np.array_equal(x, y) for x, y in zip(a.sequences, b.sequences))
    assert all(fa[m].rows.tobytes() == fb[m].rows.tobytes() for m in fa)


def test_synth_markov_rule_follows_permutation():
    ds, _, truth = synth_generate(SynthSpec(rule="markov_id"), 2, return_truth=True)
    perm = truth["permutation"]
    assert not np.any(perm == np.arange(len(perm)))
    for s in ds.sequences:
        assert np.array_equal(s[1:], perm[s[:-1]])


def test_synth_modal_neighbor_steps_stay_in_neighbor_sets():
    ds, _, truth = synth_generate(SynthSpec(), 4, return_truth=True)
    nb = truth["neighbors"]
    for s in ds.sequences:
        for a, b in zip(s[:-1], s[1:]):
            assert b in nb["visual"][a] or b in nb["textual"][a]


def test_synth_centers_are_well_separated():
    spec = SynthSpec(sigma=0.5)
    _, feats, truth = synth_generate(spec, 1, return_truth=True)
    for m, table in feats.items():
        lab = truth["labels"][m]
        means = np.stack([table.rows[lab == c].mean(0) for c in range(spec.k_true)])
        gaps = np.linalg.norm(means[:, None] - means[None], axis=-1) + np.eye(spec.k_true) * 1e9
        # sample means sit within a few sigma/sqrt(25) of centers placed 10 sigma apart
        assert gaps.min() > 9 * spec.sigma


def test_synth_kmeans_recovers_planted_labels():
    _, feats, truth = synth_generate(SynthSpec(n_items=100, k_true=4), 0, return_truth=True)
    for m in feats:
        assign = kmeans_cluster(feats[m].rows, 4, seed=0, modality=m)
        assert adjusted_rand_score(truth["labels"][m], assign.labels) >= 0.99


def test_synth_spec_text_round_trip():
    spec = SynthSpec(n_users=12, rule="mixed", mix=0.25)
    assert SynthSpec.from_text(spec.to_text()) == spec
    with pytest.raises(DataError):
        SynthSpec.from_text("bogus = 1\n")
