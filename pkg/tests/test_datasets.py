import numpy as np
import pytest

from shiftlab.datasets import (
    CsvFormatError,
    DistractorTextSpec,
    GroupedDataset,
    TwoDomainSpec,
    batches,
    gen_distractor_text,
    gen_two_domain_gaussian,
    group_metrics,
    inject_label_noise,
    load_csv,
    save_csv,
)
from shiftlab.diffcore import Example, ModelSpec, init_params


def test_two_domain_counts_and_groups():
    ds = gen_two_domain_gaussian(TwoDomainSpec(1020, 1.0 / 51.0, 0.5, seed=0))
    assert len(ds) == 1020
    groups = np.array([ex.group for ex in ds.examples])
    assert (groups == 1).sum() == 20
    assert ds.group_names == ["majority", "minority"]
    ids = [ex.id for ex in ds.examples]
    assert ids == list(range(1020))


def test_two_domain_means_separate_along_the_right_axes():
    ds = gen_two_domain_gaussian(TwoDomainSpec(4000, 0.5, 0.1, seed=1))
    for group, axis in ((0, 0), (1, 1)):
        xs = np.stack([np.asarray(ex.input) for ex in ds.examples if ex.group == group])
        labels = np.array([ex.label for ex in ds.examples if ex.group == group])
        sign = 1.0 if group == 0 else -1.0
        mean0 = xs[labels == 0, axis].mean()
        mean1 = xs[labels == 1, axis].mean()
        assert sign * mean0 < 0 < sign * mean1


def test_two_domain_spec_validation():
    with pytest.raises(ValueError):
        TwoDomainSpec(0, 0.5, 0.5)
    with pytest.raises(ValueError):
        TwoDomainSpec(10, 0.0, 0.5)
    with pytest.raises(ValueError):
        TwoDomainSpec(10, 0.5, -1.0)


def test_distractor_structure():
    spec = DistractorTextSpec(n=600, vocab_size=32, seq_len=8, bias=0.95, seed=0)
    ds = gen_distractor_text(spec)
    assert ds.group_names == ["neg/plain", "neg/distractor", "pos/plain", "pos/distractor"]
    for ex in ds.examples:
        tokens = np.asarray(ex.input)
        has_distractor = tokens[0] == 0
        assert len(tokens) == spec.seq_len + (1 if has_distractor else 0)
        assert ex.group == 2 * ex.label + int(has_distractor)
        assert 0 not in tokens[1:] if has_distractor else 0 not in tokens
    # the distractor tracks label 0 with the configured bias
    neg = [ex for ex in ds.examples if ex.label == 0]
    frac = np.mean([ex.group % 2 for ex in neg])
    assert abs(frac - spec.bias) < 0.06


def test_distractor_spec_validation():
    with pytest.raises(ValueError):
        DistractorTextSpec(n=0)
    with pytest.raises(ValueError):
        DistractorTextSpec(n=10, vocab_size=4)
    with pytest.raises(ValueError):
        DistractorTextSpec(n=10, bias=1.5)


def test_label_noise_bounds_and_extremes():
    ds = gen_two_domain_gaussian(TwoDomainSpec(200, 0.5, 0.5, seed=2))
    same = inject_label_noise(ds, 0.0, seed=0)
    assert [ex.label for ex in same.examples] == [ex.label for ex in ds.examples]
    noisy = inject_label_noise(ds, 1.0, seed=0)
    flipped = sum(a.label != b.label for a, b in zip(ds.examples, noisy.examples))
    # uniform resampling keeps ~half the labels by chance
    assert 60 < flipped < 140
    with pytest.raises(ValueError):
        inject_label_noise(ds, 1.5, seed=0)


def test_csv_round_trip_dense(tmp_path):
    ds = gen_two_domain_gaussian(TwoDomainSpec(30, 0.5, 0.5, seed=3))
    path = tmp_path / "dense.csv"
    save_csv(ds, path)
    loaded = load_csv(path)
    assert len(loaded) == len(ds)
    for a, b in zip(ds.examples, loaded.examples):
        assert np.array_equal(np.asarray(a.input), np.asarray(b.input))
        assert (a.label, a.group, a.id) == (b.label, b.group, b.id)


def test_csv_round_trip_tokens(tmp_path):
    ds = gen_distractor_text(DistractorTextSpec(n=25, seed=4))
    path = tmp_path / "tokens.csv"
    save_csv(ds, path)
    loaded = load_csv(path)
    for a, b in zip(ds.examples, loaded.examples):
        assert np.array_equal(np.asarray(a.input), np.asarray(b.input))
        assert (a.label, a.group) == (b.label, b.group)


def test_csv_format_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(CsvFormatError, match="empty"):
        load_csv(empty)

    no_label = tmp_path / "no_label.csv"
    no_label.write_text("id,f0,group\n0,1.0,0\n")
    with pytest.raises(CsvFormatError, match="line 1"):
        load_csv(no_label)

    ragged = tmp_path / "ragged.csv"
    ragged.write_text("id,f0,label,group\n0,1.0,1,0\n1,2.0,1\n")
    with pytest.raises(CsvFormatError, match="line 3"):
        load_csv(ragged)

    bad_value = tmp_path / "bad.csv"
    bad_value.write_text("id,f0,label,group\n0,1.0,yes,0\n")
    with pytest.raises(CsvFormatError, match="line 2"):
        load_csv(bad_value)

    header_only = tmp_path / "header.csv"
    header_only.write_text("id,f0,label,group\n")
    with pytest.raises(CsvFormatError, match="no data"):
        load_csv(header_only)


def test_batches_partition_all_indices():
    ds = gen_two_domain_gaussian(TwoDomainSpec(53, 0.5, 0.5, seed=5))
    seen = []
    sizes = []
    for idx in batches(ds, 10, seed=1):
        seen.extend(idx)
        sizes.append(len(idx))
    assert sorted(seen) == list(range(53))
    assert sizes == [10, 10, 10, 10, 10, 3]
    ordered = [i for idx in batches(ds, 10, shuffle=False) for i in idx]
    assert ordered == list(range(53))
    with pytest.raises(ValueError):
        list(batches(ds, 0))


def test_batches_are_seed_deterministic():
    ds = gen_two_domain_gaussian(TwoDomainSpec(40, 0.5, 0.5, seed=6))
    a = [idx for idx in batches(ds, 8, seed=3)]
    b = [idx for idx in batches(ds, 8, seed=3)]
    assert a == b


def test_group_metrics_against_hand_counts():
    # zero-weight linear model predicts class 0 everywhere (argmax tie rule)
    model = init_params(ModelSpec("linear", input_dim=1), seed=0)
    model.params[:] = 0.0
    examples = [
        Example(input=np.array([0.0]), label=0, group=0, id=0),
        Example(input=np.array([0.0]), label=1, group=0, id=1),
        Example(input=np.array([0.0]), label=0, group=1, id=2),
        Example(input=np.array([0.0]), label=0, group=1, id=3),
    ]
    ds = GroupedDataset(examples, ["a", "b"])
    gm = group_metrics(model, ds)
    assert np.allclose(gm.per_group_accuracy, [0.5, 1.0])
    assert gm.robust_accuracy == 0.5
    assert gm.average_accuracy == 0.75
    assert list(gm.group_counts) == [2, 2]
    with pytest.raises(ValueError):
        group_metrics(model, GroupedDataset([], ["a"]))


def test_subset_keeps_group_names():
    ds = gen_two_domain_gaussian(TwoDomainSpec(20, 0.5, 0.5, seed=7))
    sub = ds.subset([0, 3, 5])
    assert len(sub) == 3
    assert sub.group_names == ds.group_names
