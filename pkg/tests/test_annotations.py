import json

import numpy as np
import pytest
from PIL import Image

from sganet.annotations import (
    PointAnnotationSet,
    SynthConfig,
    load_annotations,
    resize_capped,
    save_annotations,
    synth_generate,
)

from .conftest import make_record


def write_manifest(tmp_path, entries, size=(40, 30)):
    for e in entries:
        Image.fromarray(np.zeros((size[1], size[0], 3), np.uint8)).save(tmp_path / e["image"])
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(entries))
    return path


class TestPointAnnotationSet:
    def test_bounds_are_half_open(self):
        PointAnnotationSet("a", 10, 10, [(0, 0), (9.999, 9.999)])
        with pytest.raises(ValueError, match="out-of-bounds point"):
            PointAnnotationSet("a", 10, 10, [(10, 5)])

    def test_duplicates_allowed(self):
        assert len(PointAnnotationSet("a", 10, 10, [(1, 1), (1, 1)])) == 2

    def test_error_names_image_and_index(self):
        with pytest.raises(ValueError, match=r"'b'.*index 1"):
            PointAnnotationSet("b", 10, 10, [(1, 1), (3, -0.1)])


class TestManifest:
    def test_load_one(self, tmp_path):
        path = write_manifest(tmp_path, [{"image": "a.png", "points": [[1, 2], [3, 4], [39.5, 29.5]]}])
        (rec,) = load_annotations(path)
        assert rec.count == 3
        assert rec.shape == (30, 40)
        assert rec.image_id == "a.png"

    def test_point_on_width_rejected(self, tmp_path):
        path = write_manifest(tmp_path, [{"image": "a.png", "points": [[40, 3]]}])
        with pytest.raises(ValueError, match="out-of-bounds point.*'a.png'.*index 0"):
            load_annotations(path)

    def test_empty(self, tmp_path):
        (tmp_path / "m.json").write_text("[]")
        assert load_annotations(tmp_path / "m.json") == []

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_annotations(tmp_path / "nope.json")

    @pytest.mark.parametrize("payload", ["{", '{"image": 1}', '[{"points": []}]'])
    def test_malformed(self, tmp_path, payload):
        (tmp_path / "m.json").write_text(payload)
        with pytest.raises(ValueError, match="malformed"):
            load_annotations(tmp_path / "m.json")

    def test_round_trip(self, tmp_path):
        records = synth_generate(SynthConfig(num_images=3, image_size=(64, 96), count_range=(2, 6), seed=5))
        manifest = save_annotations(records, tmp_path)
        back = load_annotations(manifest)
        assert [r.image_id for r in back] == [f"{r.image_id}.png" for r in records]
        for a, b in zip(records, back):
            np.testing.assert_array_equal(a.annotations.points, b.annotations.points)
            np.testing.assert_array_equal(a.pixel_data, b.pixel_data)
        # saving the reloaded records rewrites an identical manifest
        again = save_annotations(back, tmp_path / "again")
        assert json.loads(again.read_text()) == json.loads(manifest.read_text())


class TestSynth:
    def test_deterministic(self):
        cfg = SynthConfig(num_images=5, count_range=(10, 10), seed=7)
        a, b = synth_generate(cfg), synth_generate(cfg)
        for x, y in zip(a, b):
            assert x.pixel_data.tobytes() == y.pixel_data.tobytes()
            assert x.annotations.points.tobytes() == y.annotations.points.tobytes()

    def test_zero_heads(self):
        recs = synth_generate(SynthConfig(num_images=2, count_range=(0, 0), seed=1))
        assert all(r.count == 0 for r in recs)

    def test_exact_count_in_bounds(self):
        (rec,) = synth_generate(SynthConfig(num_images=1, image_size=(128, 128), count_range=(20, 20), seed=3))
        pts = rec.annotations.points
        assert len(pts) == 20
        assert ((pts >= 0) & (pts < 128)).all()

    def test_counts_within_range(self):
        recs = synth_generate(SynthConfig(num_images=20, count_range=(3, 6), seed=2))
        counts = {r.count for r in recs}
        assert counts <= set(range(3, 7)) and len(counts) > 1

    def test_heads_brighter_than_background(self):
        (rec,) = synth_generate(SynthConfig(num_images=1, count_range=(5, 5), background_noise_level=0.0, seed=4))
        luma = rec.pixel_data.mean(axis=2)
        cols, rows = np.floor(rec.annotations.points + 0.5).astype(int).T
        assert luma[rows, cols].mean() > np.median(luma) + 0.2

    def test_seed_changes_output(self):
        a = synth_generate(SynthConfig(num_images=1, seed=1))[0]
        b = synth_generate(SynthConfig(num_images=1, seed=2))[0]
        assert a.pixel_data.tobytes() != b.pixel_data.tobytes()

    @pytest.mark.parametrize(
        "kw",
        [
            {"image_size": (8, 8), "head_radius_range": (5, 6)},
            {"image_size": (16, 16), "count_range": (50, 50), "head_radius_range": (3, 3)},
            {"count_range": (5, 2)},
        ],
    )
    def test_infeasible(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw)


class TestResize:
    def test_cap(self):
        rec = make_record(4000, 3000, [(100, 200), (3999, 2999)])
        out = resize_capped(rec, 2048)
        assert out.shape == (1536, 2048)
        np.testing.assert_allclose(out.annotations.points[0], (51.2, 102.4))
        assert out.count == 2
        assert (out.annotations.points[:, 0] < 2048).all()

    def test_below_cap_unchanged(self):
        rec = make_record(1024, 768, [(5, 5)])
        assert resize_capped(rec, 2048) is rec

    def test_half_scale(self):
        rec = make_record(200, 100, [(100, 20)])
        out = resize_capped(rec, 100)
        assert out.shape == (50, 100)
        np.testing.assert_allclose(out.annotations.points, [[50, 10]])

    def test_constant_image_stays_constant(self):
        out = resize_capped(make_record(300, 200, [], fill=0.25), 150)
        np.testing.assert_allclose(out.pixel_data, 0.25, atol=1e-6)

    def test_invalid(self):
        with pytest.raises(ValueError):
            resize_capped(make_record(10, 10, []), 0)
