import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from protolab import desiderata as dd
from protolab.desiderata import (
    MasksUnavailableError,
    purity_from_heatmap,
    redundancy,
    task_relevance,
    top_k_prototypes,
    transformation_consistency,
)
from protolab.protopnet import (
    PrototypeLayerConfig,
    ProtoPNet,
    TrainConfig,
    train,
)
from protolab.prototree import SoftTree
from protolab.shapes import Transform, make_dataset


@pytest.fixture(scope="module")
def tiny_v2():
    return make_dataset("V2", 3, 321)


@pytest.fixture(scope="module")
def micro_model(tiny_v2):
    cfg = TrainConfig(warmup_epochs=1, joint_epochs=2, last_layer_epochs=1,
                      per_class_count=2, seed=17)
    return train(cfg, tiny_v2).model


class TestPurity:
    def test_heatmap_inside_one_mask_scores_one(self):
        mask = np.zeros((128, 128), dtype=bool)
        mask[10:40, 10:40] = True
        values = np.zeros((128, 128))
        values[15:25, 15:25] = 1.0
        assert purity_from_heatmap(values, [mask]) == pytest.approx(1.0)

    def test_heatmap_on_background_scores_zero(self):
        mask = np.zeros((128, 128), dtype=bool)
        mask[10:40, 10:40] = True
        values = np.zeros((128, 128))
        values[100:120, 100:120] = 1.0
        assert purity_from_heatmap(values, [mask]) == pytest.approx(0.0)

    def test_uniform_heatmap_equals_best_mask_area_fraction(self):
        # analytic ratio: with an all-equal heatmap the top region is the whole
        # image, so purity must equal max mask area / image area
        m1 = np.zeros((128, 128), dtype=bool)
        m1[:32, :32] = True  # 1024 px
        m2 = np.zeros((128, 128), dtype=bool)
        m2[64:, 64:] = True  # 4096 px
        values = np.full((128, 128), 2.5)
        expect = 4096 / (128 * 128)
        assert purity_from_heatmap(values, [m1, m2]) == pytest.approx(expect)

    def test_masks_required(self, micro_model, tiny_v2):
        import copy

        bare = copy.copy(tiny_v2)
        bare.mask_sets = []
        with pytest.raises(MasksUnavailableError):
            dd.purity(micro_model, 0, bare)

    def test_model_purity_in_unit_interval(self, micro_model, tiny_v2):
        for backend in ("upsample", "prp"):
            p = dd.purity(micro_model, 0, tiny_v2, backend)
            assert 0.0 <= p <= 1.0


class TestRedundancy:
    def test_duplicated_vector_flagged(self, micro_model, tiny_v2):
        with torch.no_grad():
            micro_model.prototypes[1] = micro_model.prototypes[0]
        result = redundancy(micro_model, 0, tiny_v2)
        assert result.matrix[0, 1] == pytest.approx(1.0)
        assert (0, 1) in result.duplicates

    def test_matrix_symmetric_unit_diagonal(self, micro_model, tiny_v2):
        result = redundancy(micro_model, 1, tiny_v2)
        assert np.allclose(result.matrix, result.matrix.T)
        assert np.allclose(np.diag(result.matrix), 1.0)
        assert ((result.matrix >= 0) & (result.matrix <= 1)).all()

    def test_orthogonal_vectors_disjoint_regions_score_zero(self):
        # direct computation on the building blocks
        a = np.zeros((128, 128), dtype=bool)
        a[:10, :10] = True
        b = np.zeros((128, 128), dtype=bool)
        b[-10:, -10:] = True
        assert dd._region_iou(a, b) == 0.0
        va = np.array([1.0, 0.0])
        vb = np.array([0.0, 1.0])
        cos = float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))
        assert cos == 0.0

    def test_needs_two_prototypes(self, tiny_v2):
        model = ProtoPNet.build(3, PrototypeLayerConfig(per_class_count=1), seed=0)
        with pytest.raises(ValueError):
            redundancy(model, 0, tiny_v2)

    def test_empty_probe_set_rejected(self, micro_model, tiny_v2):
        import copy

        empty = copy.copy(tiny_v2)
        empty.images = tiny_v2.images[:0]
        empty.labels = tiny_v2.labels[:0]
        empty.mask_sets = []
        empty.specs = []
        with pytest.raises(ValueError):
            redundancy(micro_model, 0, empty)


class TestTopK:
    def test_selection(self):
        assert top_k_prototypes(np.array([0.1, 5.0, 3.0, 4.0]), 2) == [1, 3]

    @given(
        st.lists(st.integers(-10_000, 10_000), min_size=4, max_size=12),
        st.integers(1, 4),
    )
    @settings(max_examples=60, deadline=None)
    def test_invariant_under_strictly_increasing_transform(self, scores, k):
        # integer scores keep the affine map exactly order-preserving
        scores = np.asarray(scores, dtype=np.float64)
        base = top_k_prototypes(scores, k)
        transformed = top_k_prototypes(3.0 * scores + 7.0, k)
        assert base == transformed


class TestTransformationConsistency:
    def test_identity_transform_scores_one(self, micro_model, tiny_v2):
        probes = transformation_consistency(
            micro_model, tiny_v2, [Transform.rotate(0.0)], k=3
        )
        assert probes[0].top_k_overlap == pytest.approx(1.0)
        assert probes[0].same_class_fraction is not None

    def test_identity_tree_path_equality_one(self, tiny_v2):
        tree = SoftTree.build(3, depth=2, seed=3)
        probes = transformation_consistency(tree, tiny_v2, [Transform.rotate(0.0)], k=3)
        assert probes[0].top_k_overlap == pytest.approx(1.0)
        assert probes[0].path_equality_rate == pytest.approx(1.0)
        assert probes[0].same_class_fraction is None

    def test_default_transforms_produce_metrics(self, micro_model, tiny_v2):
        probes = transformation_consistency(
            micro_model, tiny_v2, [Transform.rotate(25.0), Transform.center_crop(0.8)], k=3
        )
        assert len(probes) == 2
        for p in probes:
            assert 0.0 <= p.top_k_overlap <= 1.0
            assert 0.0 <= p.same_class_fraction <= 1.0


class TestTaskRelevance:
    def test_unprojected_rejected(self, tiny_v2):
        model = ProtoPNet.build(3, PrototypeLayerConfig(per_class_count=2), seed=1)
        with pytest.raises(ValueError, match="unprojected"):
            task_relevance(model, tiny_v2)

    def test_outcomes_cover_all_prototypes(self, micro_model, tiny_v2):
        result = task_relevance(micro_model, tiny_v2)
        assert len(result.outcomes) == micro_model.num_prototypes
        assert 0.0 <= result.accuracy <= 1.0
        assert all(
            o["correct"] == (o["predicted"] == o["class"]) for o in result.outcomes
        )


class TestEvaluateModel:
    def test_full_report_protopnet(self, micro_model, tiny_v2):
        report = dd.evaluate_model(
            micro_model, tiny_v2, model_id="m0",
            transforms=[Transform.rotate(25.0)], backends=("upsample", "prp"),
        )
        doc = report.to_json()
        assert doc["schema_version"] == 1
        assert set(doc["purity"].keys()) == {"upsample", "prp"}
        assert len(doc["purity"]["upsample"]) == micro_model.num_prototypes
        assert len(doc["redundancy"]) == 3
        # identity probe is prepended
        assert doc["transformation_consistency"][0]["top_k_overlap"] == 1.0
        assert doc["task_relevance"]["accuracy"] is not None

    def test_full_report_tree(self, tiny_v2):
        tree = SoftTree.build(3, depth=2, seed=5)
        report = dd.evaluate_model(tree, tiny_v2, model_id="t0",
                                   transforms=[Transform.center_crop(0.8)])
        doc = report.to_json()
        assert set(doc["purity"].keys()) == {"upsample"}
        assert doc["transformation_consistency"][1]["path_equality_rate"] is not None
