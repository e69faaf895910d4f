import numpy as np
import pytest

from protolab.explain import (
    PatchBox,
    crop_to_canvas,
    extract_patch,
    prototype_heatmap,
    top_region_mask,
    upsample_map,
)
from protolab.protopnet import ProtoPNet, PrototypeLayerConfig, images_to_tensor
from protolab.prp import conservation_ratios, prp_relevance
from protolab.shapes import make_dataset


def bilinear_oracle(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Independent per-pixel loop with half-pixel center alignment."""
    in_h, in_w = values.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = min(max((i + 0.5) * in_h / out_h - 0.5, 0.0), in_h - 1.0)
            x = min(max((j + 0.5) * in_w / out_w - 0.5, 0.0), in_w - 1.0)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, in_h - 1), min(x0 + 1, in_w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = (
                values[y0, x0] * (1 - fy) * (1 - fx)
                + values[y0, x1] * (1 - fy) * fx
                + values[y1, x0] * fy * (1 - fx)
                + values[y1, x1] * fy * fx
            )
    return out


class TestUpsample:
    def test_constant_map_stays_constant(self):
        heat = upsample_map(np.full((8, 8), 3.25))
        assert np.allclose(heat.values, 3.25)
        assert heat.values.shape == (128, 128)

    def test_matches_naive_bilinear_oracle(self):
        rng = np.random.default_rng(7)
        values = rng.normal(size=(8, 8))
        heat = upsample_map(values, size=32)
        assert np.abs(heat.values - bilinear_oracle(values, 32, 32)).max() < 1e-5

    def test_peak_stays_within_one_cell(self):
        values = np.zeros((8, 8))
        values[2, 5] = 1.0
        heat = upsample_map(values)
        r, c = heat.argmax
        cell = 128 / 8
        # scaled peak center is at ((2+0.5)*16, (5+0.5)*16)
        assert abs(r - (2.5 * cell - 0.5)) <= cell
        assert abs(c - (5.5 * cell - 0.5)) <= cell

    def test_values_bounded_by_input_range(self):
        rng = np.random.default_rng(8)
        values = rng.uniform(-2, 5, size=(8, 8))
        heat = upsample_map(values)
        assert heat.values.min() >= values.min() - 1e-12
        assert heat.values.max() <= values.max() + 1e-12


class TestExtractPatch:
    def test_single_nonzero_pixel(self):
        values = np.zeros((128, 128))
        values[17, 90] = 1.0
        box = extract_patch(values, percentile=99)
        assert (box.top, box.left, box.bottom, box.right) == (17, 90, 17, 90)
        assert box.height == box.width == 1

    def test_degenerate_heatmap_gives_full_image_with_warning(self):
        with pytest.warns(UserWarning):
            box = extract_patch(np.ones((128, 128)))
        assert (box.top, box.left, box.bottom, box.right) == (0, 0, 127, 127)

    def test_nesting_in_percentile(self):
        rng = np.random.default_rng(9)
        values = rng.normal(size=(128, 128))
        box95 = extract_patch(values, percentile=95)
        box99 = extract_patch(values, percentile=99)
        assert box95.contains(box99)

    def test_non_finite_rejected(self):
        values = np.zeros((8, 8))
        values[0, 0] = np.nan
        with pytest.raises(ValueError):
            extract_patch(values)

    def test_top_region_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(10)
        values = rng.normal(size=(64, 64))
        mask = top_region_mask(values, 95)
        mask_t = top_region_mask(np.exp(2.0 * values) + 1.0, 95)
        assert (mask == mask_t).all()


class TestCropToCanvas:
    def test_patch_lands_centered_on_background(self):
        ds = make_dataset("V2", 1, 3)
        img = ds.images[0]
        box = PatchBox(10, 20, 29, 49)
        canvas = crop_to_canvas(img, box)
        assert canvas.shape == img.shape
        r0 = (128 - box.height) // 2
        c0 = (128 - box.width) // 2
        assert (canvas[r0 : r0 + box.height, c0 : c0 + box.width] == img[box.slices]).all()


@pytest.fixture(scope="module")
def model_and_image():
    ds = make_dataset("V2", 2, 5)
    model = ProtoPNet.build(3, PrototypeLayerConfig(per_class_count=2), seed=1)
    model.eval()
    return model, ds.images[0], images_to_tensor(ds.images)[0]


class TestPRP:
    def test_output_nonnegative(self, model_and_image):
        model, _, tensor = model_and_image
        for j in range(model.num_prototypes):
            heat = prp_relevance(model, j, tensor)
            assert heat.values.min() >= 0.0

    def test_conservation_within_one_percent_per_layer(self, model_and_image):
        model, _, tensor = model_and_image
        _, audit = prp_relevance(model, 0, tensor, return_audit=True)
        for ratio in conservation_ratios(audit):
            assert abs(ratio - 1.0) <= 0.01

    def test_total_relevance_matches_initialized_similarity(self, model_and_image):
        model, _, tensor = model_and_image
        heat, audit = prp_relevance(model, 1, tensor, return_audit=True)
        init = audit[0][1]
        assert heat.values.sum() == pytest.approx(init, rel=0.01)

    def test_prototype_id_out_of_range(self, model_and_image):
        model, _, tensor = model_and_image
        with pytest.raises(IndexError):
            prp_relevance(model, model.num_prototypes, tensor)

    def test_rule_registry_is_pluggable(self, model_and_image):
        model, _, tensor = model_and_image
        calls = []

        def spy_rule(layer, a_in, r_out):
            calls.append(type(layer).__name__)
            return r_out

        heat = prp_relevance(model, 0, tensor, rules={"pass": spy_rule})
        assert calls  # custom rule actually consulted
        assert heat.backend == "prp"

    def test_backend_dispatch(self, model_and_image):
        model, image, _ = model_and_image
        up = prototype_heatmap(model, image, 0, backend="upsample")
        pr = prototype_heatmap(model, image, 0, backend="prp")
        assert up.backend == "upsample" and pr.backend == "prp"
        assert up.values.shape == pr.values.shape == (128, 128)
        with pytest.raises(ValueError):
            prototype_heatmap(model, image, 0, backend="gradcam")
