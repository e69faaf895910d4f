import numpy as np
import pytest

from protolab import shapes
from protolab.shapes import (
    MaskSet,
    SceneOverlapError,
    SceneSpec,
    ShapeKind,
    ShapePlacement,
    Transform,
    make_dataset,
    render_scene,
    transform_image,
    train_test_split,
)

BG = (0.78, 0.77, 0.79)


def centered(kind, scale=0.3, pos=(0.5, 0.5), rot=0.0):
    return SceneSpec((ShapePlacement(kind, pos, scale, rot),), BG)


class TestRenderScene:
    def test_empty_scene_is_background_only(self):
        img, masks = render_scene(SceneSpec((), BG))
        assert img.shape == (128, 128, 3)
        assert len(masks) == 0
        # uniform background
        assert (img == img[0, 0]).all()

    def test_determinism(self):
        spec = centered(ShapeKind.CUBE, rot=33.0)
        img1, _ = render_scene(spec)
        img2, _ = render_scene(spec)
        assert (img1 == img2).all()

    def test_disc_mask_area_matches_analytic(self):
        # independent oracle: pi * r^2 at render resolution
        img, masks = render_scene(centered(ShapeKind.SPHERE, scale=0.3))
        r = 0.3 * 128 / 2.0
        expected = np.pi * r * r
        assert len(masks) == 1
        area = masks.entries[0][1].sum()
        assert abs(area - expected) / expected < 0.05

    def test_overlap_rejected(self):
        spec = SceneSpec(
            (
                ShapePlacement(ShapeKind.SPHERE, (0.5, 0.5), 0.3),
                ShapePlacement(ShapeKind.CUBE, (0.55, 0.5), 0.3),
            ),
            BG,
        )
        with pytest.raises(SceneOverlapError):
            render_scene(spec)

    def test_too_many_shapes_rejected(self):
        placements = tuple(
            ShapePlacement(ShapeKind.SPHERE, (0.1 + 0.18 * i, 0.2), 0.1)
            for i in range(5)
        )
        with pytest.raises(ValueError):
            render_scene(SceneSpec(placements, BG))

    @pytest.mark.parametrize("kind", list(ShapeKind))
    def test_every_kind_renders_with_nonempty_mask(self, kind):
        img, masks = render_scene(centered(kind))
        mask = masks.entries[0][1]
        assert mask.any()
        # support strictly inside image bounds
        assert not mask[0].any() and not mask[-1].any()
        assert not mask[:, 0].any() and not mask[:, -1].any()


class TestMakeDataset:
    def test_v1_class0_has_three_masks(self):
        ds = make_dataset("V1", 10, 7)
        assert len(ds) == 30
        want = {ShapeKind.CUBE, ShapeKind.SPHERE, ShapeKind.CONE}
        for i in np.flatnonzero(ds.labels == 0):
            assert set(ds.mask_sets[i].kinds()) == want
            assert len(ds.mask_sets[i]) == 3

    def test_v2_compositions_mutually_exclusive(self):
        ds = make_dataset("V2", 1, 0)
        assert len(ds) == 3
        comps = list(ds.class_composition.values())
        union = set().union(*comps)
        assert len(union) == 6
        for i in range(3):
            for j in range(i + 1, 3):
                assert not (comps[i] & comps[j])

    def test_v1_pairwise_intersections(self):
        comp = shapes.V1_COMPOSITIONS
        assert comp[0] & comp[1] == {ShapeKind.SPHERE}
        assert comp[0] & comp[2] == {ShapeKind.CONE}
        assert comp[1] & comp[2] == {ShapeKind.ICOSPHERE}

    def test_determinism(self):
        a = make_dataset("V2", 3, 11)
        b = make_dataset("V2", 3, 11)
        assert (a.labels == b.labels).all()
        assert (a.images == b.images).all()

    def test_unknown_version(self):
        with pytest.raises(ValueError):
            make_dataset("V3", 1, 0)

    def test_masks_disjoint_and_composition_consistent_batch(self):
        # invariant sweep over a 100-sample batch
        for version, n in (("V1", 17), ("V2", 17)):
            ds = make_dataset(version, n, 23)
            for i in range(len(ds)):
                ms = ds.mask_sets[i]
                assert ms.pairwise_disjoint()
                assert set(ms.kinds()) == ds.class_composition[int(ds.labels[i])]

    def test_train_test_split(self):
        ds = make_dataset("V2", 10, 5)
        tr, te = train_test_split(ds, 0.8)
        assert len(tr) == 24 and len(te) == 6
        for part in (tr, te):
            assert set(np.unique(part.labels)) == {0, 1, 2}


class TestTransforms:
    def test_rotate_zero_is_identity(self):
        ds = make_dataset("V2", 1, 1)
        out = transform_image(ds.images[0], Transform.rotate(0.0))
        assert (out == ds.images[0]).all()

    def test_crop_one_is_identity(self):
        ds = make_dataset("V2", 1, 1)
        out = transform_image(ds.images[0], Transform.center_crop(1.0))
        assert (out == ds.images[0]).all()

    def test_rotate_round_trip_within_tolerance(self):
        # round-trip oracle: +25 then -25 equals original inside the inscribed disc
        ds = make_dataset("V1", 2, 3)
        yy, xx = np.mgrid[0:128, 0:128]
        inside = np.hypot(yy - 63.5, xx - 63.5) <= 62.0
        for i in range(len(ds)):
            img = ds.images[i]
            back = transform_image(
                transform_image(img, Transform.rotate(25.0)), Transform.rotate(-25.0)
            )
            err = np.abs(back.astype(int) - img.astype(int)).max(axis=-1)
            assert err[inside].max() <= 8

    def test_rotate_fills_corners_with_background(self):
        ds = make_dataset("V2", 1, 2)
        img = ds.images[0]
        out = transform_image(img, Transform.rotate(45.0))
        # corners were outside the source frame: equal to the corner tint
        assert np.abs(out[0, 0].astype(int) - img[0, 0].astype(int)).max() <= 2

    def test_bad_crop_fraction(self):
        with pytest.raises(ValueError):
            Transform.center_crop(0.0)
        with pytest.raises(ValueError):
            Transform.center_crop(1.2)


class TestDatasetIO:
    def test_save_load_round_trip(self, tmp_path):
        ds = make_dataset("V1", 2, 9)
        shapes.save_dataset(ds, tmp_path / "d")
        back = shapes.load_dataset(tmp_path / "d")
        assert (back.images == ds.images).all()
        assert (back.labels == ds.labels).all()
        assert back.class_composition == ds.class_composition
        for a, b in zip(back.mask_sets, ds.mask_sets):
            assert a.kinds() == b.kinds()
            assert all((ma == mb).all() for (_, ma), (_, mb) in zip(a, b))
        assert back.specs == ds.specs

    def test_manifest_lists_all_files(self, tmp_path):
        import json

        ds = make_dataset("V2", 1, 4)
        shapes.save_dataset(ds, tmp_path / "d")
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert len(manifest["entries"]) == 3
        for entry in manifest["entries"]:
            assert (tmp_path / "d" / entry["image"]).exists()
            for rel in entry["masks"].values():
                assert (tmp_path / "d" / rel).exists()


def test_maskset_helpers():
    m = np.zeros((128, 128), dtype=bool)
    m[3:10, 4:12] = True
    ms = MaskSet([(ShapeKind.CUBE, m)])
    assert ms.get(ShapeKind.CUBE) is m
    with pytest.raises(KeyError):
        ms.get(ShapeKind.TORUS)
    assert ms.pairwise_disjoint()
