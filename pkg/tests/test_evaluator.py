import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from sganet.evaluator import (
    EvalReport,
    config_digest,
    evaluate,
    folds_from_file,
    kfold_splits,
    mae,
    panel_titles,
    predict_count,
    render_overlays,
    rmse,
)
from sganet.network import NetworkSpec, build

from .conftest import make_record


def loop_mae(pairs):
    total = 0.0
    for y, y_hat in pairs:
        total += abs(y - y_hat)
    return total / len(pairs)


def loop_rmse(pairs):
    total = 0.0
    for y, y_hat in pairs:
        total += (y - y_hat) ** 2
    return math.sqrt(total / len(pairs))


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return build(NetworkSpec("micro", 0.0625)).eval()


pairs_strategy = st.lists(
    st.tuples(st.floats(0, 1e4), st.floats(-1e3, 1e4)), min_size=1, max_size=50
)


class TestMetrics:
    def test_worked_pair(self):
        pairs = [(10, 12), (20, 17)]
        assert mae(pairs) == 2.5
        assert rmse(pairs) == pytest.approx(2.5495, abs=5e-5)
        assert rmse(pairs) == math.sqrt(6.5)

    def test_random_pairs_match_loops(self, rng):
        pairs = [tuple(p) for p in rng.uniform(0, 500, size=(100, 2))]
        assert mae(pairs) == pytest.approx(loop_mae(pairs), rel=1e-13)
        assert rmse(pairs) == pytest.approx(loop_rmse(pairs), rel=1e-13)

    @settings(max_examples=100, deadline=None)
    @given(pairs_strategy)
    def test_rmse_bounds_mae(self, pairs):
        assert rmse(pairs) >= mae(pairs) * (1 - 1e-12) - 1e-9

    def test_perfect_prediction(self):
        assert mae([(3, 3), (7, 7)]) == rmse([(3, 3), (7, 7)]) == 0.0

    @pytest.mark.parametrize("fn", [mae, rmse])
    def test_empty(self, fn):
        with pytest.raises(ValueError):
            fn([])


class TestKFold:
    def test_fifty_into_five(self):
        ids = [f"img{i}" for i in range(50)]
        splits = kfold_splits(ids, 5)
        tests = [set(t) for _, t in splits]
        assert [len(t) for t in tests] == [10] * 5
        assert set().union(*tests) == set(ids)
        assert all(a.isdisjoint(b) for i, a in enumerate(tests) for b in tests[i + 1 :])
        for train, test in splits:
            assert set(train) | set(test) == set(ids) and not set(train) & set(test)

    def test_uneven(self):
        sizes = sorted(len(t) for _, t in kfold_splits(range(12), 5))
        assert sizes == [2, 2, 2, 3, 3]

    def test_seeded(self):
        assert kfold_splits(range(20), 4, seed=1) == kfold_splits(range(20), 4, seed=1)
        assert kfold_splits(range(20), 4, seed=1) != kfold_splits(range(20), 4, seed=2)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 12).flatmap(lambda k: st.tuples(st.just(k), st.integers(k, 80))), st.integers(0, 9))
    def test_partition_properties(self, k_n, seed):
        k, n = k_n
        splits = kfold_splits(range(n), k, seed=seed)
        tests = [t for _, t in splits]
        assert len(tests) == k
        assert sorted(i for t in tests for i in t) == list(range(n))
        assert max(map(len, tests)) - min(map(len, tests)) <= 1
        assert splits == kfold_splits(range(n), k, seed=seed)

    def test_fold_file(self, tmp_path):
        (tmp_path / "folds.json").write_text(json.dumps([["a", "c"], ["b"], ["d"]]))
        splits = folds_from_file(tmp_path / "folds.json", ["a", "b", "c", "d"])
        assert splits[0] == (["b", "d"], ["a", "c"])
        assert [t for _, t in splits] == [["a", "c"], ["b"], ["d"]]

    @pytest.mark.parametrize(
        "folds", [[["a"], ["a", "b"]], [["a"], ["c"]], [["a", "b"]], {"a": 1}]
    )
    def test_bad_fold_file(self, tmp_path, folds):
        (tmp_path / "folds.json").write_text(json.dumps(folds))
        with pytest.raises(ValueError):
            folds_from_file(tmp_path / "folds.json", ["a", "b"])

    @pytest.mark.parametrize("k", [1, 0, 2.5, 60])
    def test_invalid(self, k):
        with pytest.raises(ValueError):
            kfold_splits(range(50), k)


class TestPrediction:
    def test_shapes_and_count(self, model, rng):
        rec = make_record(100, 70, [(5, 5)])
        rec.pixel_data[:] = rng.random(rec.pixel_data.shape)
        den, att, count = predict_count(model, rec)
        assert den.shape == att.shape == (18, 25)
        assert den.stride == 4 and not att.binary
        assert count == pytest.approx(den.values.sum())

    @pytest.mark.parametrize("multiple", [64, 160, 256])
    def test_padding_amount_irrelevant(self, model, synth_records, multiple):
        rec = synth_records[3]
        base = predict_count(model, rec)[2]
        assert predict_count(model, rec, multiple=multiple)[2] == pytest.approx(base, abs=1e-4)

    def test_multiple_must_suit_network(self, model, synth_records):
        with pytest.raises(ValueError):
            predict_count(model, synth_records[0], multiple=48)

    def test_pure(self, model, synth_records):
        rec = synth_records[0]
        before = rec.pixel_data.copy()
        a = predict_count(model, rec)[2]
        b = predict_count(model, rec)[2]
        assert a == b and np.array_equal(rec.pixel_data, before)

    def test_restores_training_mode(self, synth_records):
        m = build(NetworkSpec("micro", 0.0625)).train()
        predict_count(m, synth_records[0])
        assert m.training

    def test_zero_attention_gives_bias_count(self, model, synth_records):
        rec = synth_records[1]
        zeros = torch.zeros(1, 32, 32)
        _, _, count = predict_count(model, rec, attention=zeros)
        assert count == pytest.approx(32 * 32 * model.density.bias.item(), rel=1e-5)


class TestEvaluate:
    def test_report(self, model, synth_records, tmp_path):
        report = evaluate(model, synth_records, out=tmp_path / "report.json")
        assert [p[0] for p in report.per_image] == [r.image_id for r in synth_records]
        assert [p[1] for p in report.per_image] == [float(r.count) for r in synth_records]
        pairs = [(y, y_hat) for _, y, y_hat in report.per_image]
        assert report.mae == pytest.approx(loop_mae(pairs), rel=1e-12)
        assert report.rmse == pytest.approx(loop_rmse(pairs), rel=1e-12)
        back = EvalReport.read(tmp_path / "report.json")
        assert back.to_dict() == report.to_dict()

    def test_digest_tracks_weights(self, model):
        other = build(NetworkSpec("micro", 0.0625))
        assert config_digest(model) == config_digest(model)
        assert config_digest(model) != config_digest(other)
        assert len(config_digest(model)) == 16

    def test_max_side(self, model):
        rec = make_record(256, 128, [(10, 10)])
        report = evaluate(model, [rec], max_side=128)
        assert report.per_image[0][1] == 1.0


class TestOverlays:
    def test_titles(self):
        rec = make_record(32, 32, [], image_id="crowd.png")
        titles = panel_titles(rec, 12.04, 11.96)
        assert titles[1].endswith("(count 12.0)") and titles[2].endswith("(count 12.0)")
        assert len(titles) == 4

    def test_writes_png(self, model, synth_records, tmp_path):
        rec = synth_records[2]
        den, att, _ = predict_count(model, rec)
        path = render_overlays(rec, den, att, tmp_path)
        assert path.name == f"{rec.image_id}_overlay.png"
        with Image.open(path) as img:
            assert img.size[0] > img.size[1] > 0
