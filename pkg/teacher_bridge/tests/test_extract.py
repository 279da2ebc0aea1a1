import json

import numpy as np
import pytest
from PIL import Image

from teacher_bridge import EncoderUnavailable, StubEncoder, build_encoder, \
    encode_one, extract
from teacher_bridge.cli import main
from teacher_bridge.encoders import TEACHER_DIMS


def make_image_scene(root, n=2, size=32, seed=0):
    """A posed image set without features: what a capture rig hands over."""
    rng = np.random.default_rng(seed)
    (root / "images").mkdir(parents=True)
    images = []
    for i in range(n):
        img = (rng.random((size, size, 3)) * 255).astype(np.uint8)
        rel = f"images/{i:04d}.png"
        Image.fromarray(img).save(root / rel)
        images.append(rel)
    cam = {"rotation": list(np.eye(3).reshape(-1)), "translation": [0, 0, 4],
           "fx": 40.0, "fy": 40.0, "cx": (size - 1) / 2, "cy": (size - 1) / 2,
           "width": size, "height": size, "near": 1.0, "far": 8.0}
    manifest = {"format": "featfield-scene", "version": 1, "teacher": "none",
                "feature_dim": 0, "near": 1.0, "far": 8.0,
                "split": {"train": list(range(n - 1)), "holdout": [n - 1]},
                "cameras": [cam] * n, "images": images, "features": [],
                "queries": "queries.json"}
    (root / "scene.json").write_text(json.dumps(manifest))
    return root


class TestStubEncoder:
    def test_deterministic(self):
        img = (np.random.default_rng(0).random((24, 24, 3)) * 255).astype(np.uint8)
        e = StubEncoder(dim=8, seed=3)
        assert np.array_equal(e.encode_image(img), e.encode_image(img))

    def test_reduced_size_follows_stride(self):
        img = np.zeros((32, 32, 3), dtype=np.uint8)
        fmap = StubEncoder(dim=8, stride=4).encode_image(img)
        assert fmap.shape == (8, 8, 8)

    def test_text_embeddings_unit_norm_and_stable(self):
        e = StubEncoder(dim=16)
        a = e.encode_text("chair")
        assert abs(np.linalg.norm(a) - 1.0) < 1e-12
        assert np.array_equal(a, StubEncoder(dim=16).encode_text("chair"))
        assert not np.array_equal(a, e.encode_text("table"))

    def test_registry_dims_match_teachers(self):
        assert TEACHER_DIMS["dino"] == 384
        assert TEACHER_DIMS["lseg"] == 512

    def test_unknown_teacher(self):
        with pytest.raises(ValueError):
            build_encoder("sam")

    def test_lseg_unavailable_explains_install(self):
        with pytest.raises(EncoderUnavailable, match="lang-seg"):
            build_encoder("lseg")


class TestFlipAveraging:
    def test_on_vs_off_shift_is_half_the_mirror_asymmetry(self):
        rng = np.random.default_rng(1)
        img = (rng.random((32, 32, 3)) * 255).astype(np.uint8)
        enc = StubEncoder(dim=8, stride=4, seed=0)
        f_off = encode_one(enc, img, flip_average=False)
        f_on = encode_one(enc, img, flip_average=True)
        mirror_feats = enc.encode_image(img[:, ::-1])[:, ::-1]
        asymmetry = enc.encode_image(img) - mirror_feats
        # averaging moves the output exactly halfway toward the mirror view
        np.testing.assert_allclose(
            np.abs(f_on - f_off), 0.5 * np.abs(asymmetry), atol=1e-6)
        assert np.abs(asymmetry).max() > 1e-3  # the stub really is asymmetric

    def test_averaged_features_are_mirror_consistent(self):
        rng = np.random.default_rng(2)
        img = (rng.random((32, 32, 3)) * 255).astype(np.uint8)
        enc = StubEncoder(dim=8, stride=4, seed=0)
        f_img = encode_one(enc, img, flip_average=True)
        f_mirror = encode_one(enc, img[:, ::-1], flip_average=True)
        np.testing.assert_allclose(f_img, f_mirror[:, ::-1], atol=1e-12)


class TestExtractionContract:
    def test_emitted_dataset_loads_in_the_engine(self, tmp_path):
        """Cross-component contract: bytes written here must be valid for the
        engine's loader."""
        featfield_datastore = pytest.importorskip("featfield.datastore")
        scene = make_image_scene(tmp_path / "scene")
        info = extract(scene, "stub", labels=["wall", "floor"], dim=12,
                       flip_average=True)
        assert info["dim"] == 12
        ds = featfield_datastore.load_dataset(scene)
        assert ds.feature_dim == 12
        assert ds.features.shape == (2, 32, 32, 12)
        assert set(ds.table.names()) == {"wall", "floor"}
        assert ds.teacher == "stub"

    def test_reduced_maps_resize_at_engine_load(self, tmp_path):
        featfield_datastore = pytest.importorskip("featfield.datastore")
        scene = make_image_scene(tmp_path / "scene")
        extract(scene, "stub", labels=["a", "b"], dim=6, full_resolution=False)
        from teacher_bridge.formats import FMAP_MAGIC
        raw = (scene / "features" / "0000.fmap").read_bytes()
        assert raw[:4] == FMAP_MAGIC
        import struct
        _, h, w, d = struct.unpack("<IIII", raw[4:20])
        assert (h, w) == (8, 8)  # stride-4 native size on disk
        ds = featfield_datastore.load_dataset(scene)
        assert ds.features.shape == (2, 32, 32, 6)  # engine resized

    def test_fmap_header_dim_matches_teacher(self, tmp_path):
        scene = make_image_scene(tmp_path / "scene")
        extract(scene, "stub", labels=[], dim=16)
        import struct
        raw = (scene / "features" / "0001.fmap").read_bytes()
        assert struct.unpack("<IIII", raw[4:20])[3] == 16

    def test_cli_round(self, tmp_path, capsys):
        scene = make_image_scene(tmp_path / "scene")
        rc = main(["--scene", str(scene), "--teacher", "stub",
                   "--labels", "cat,dog", "--dim", "8", "--flip-average"])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["teacher"] == "stub" and out["dim"] == 8

    def test_cli_reports_unavailable_teacher(self, tmp_path, capsys):
        scene = make_image_scene(tmp_path / "scene")
        rc = main(["--scene", str(scene), "--teacher", "lseg"])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error: ")
