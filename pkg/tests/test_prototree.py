import numpy as np
import pytest
import torch

from protolab import prototree as pt
from protolab.protopnet import images_to_tensor
from protolab.prototree import (
    SoftTree,
    TreeConfig,
    project_tree_prototypes,
    route_probability,
    train_tree,
)
from protolab.shapes import make_dataset


@pytest.fixture(scope="module")
def tiny_v2():
    return make_dataset("V2", 4, 123)


class TestRouteProbability:
    def test_planted_patch_routes_right_with_certainty(self):
        rng = np.random.default_rng(0)
        z = rng.uniform(size=(4, 4, 8))
        p = z[1, 2].copy()
        assert route_probability(z, p) == pytest.approx(1.0)

    def test_ln2_distance_gives_half(self):
        # analytic inverse: exp(-ln 2) = 0.5
        z = np.zeros((1, 1, 1))
        p = np.array([np.sqrt(np.log(2.0))])
        assert route_probability(z, p) == pytest.approx(0.5, rel=1e-9)

    def test_strictly_decreasing_in_distance(self):
        z = np.zeros((1, 1, 1))
        probs = [route_probability(z, np.array([np.sqrt(d)])) for d in np.linspace(0, 5, 30)]
        assert all(a > b for a, b in zip(probs, probs[1:]))

    def test_bounded_in_unit_interval(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            z = rng.normal(size=(3, 3, 4))
            p = rng.normal(size=4) * 5
            assert 0.0 <= route_probability(z, p) <= 1.0


class TestTreeStructure:
    def test_node_and_leaf_counts(self):
        for depth in (1, 2, 3, 4):
            tree = SoftTree.build(3, depth=depth, seed=0)
            assert tree.n_internal == 2**depth - 1
            assert tree.n_leaves == 2**depth
            assert tree.prototypes.shape[0] == 2**depth - 1

    def test_leaf_distributions_sum_to_one(self):
        tree = SoftTree.build(3, depth=3, seed=1)
        sums = tree.leaf_distributions().sum(dim=1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)


class TestPredict:
    def test_leaf_path_probabilities_sum_to_one(self, tiny_v2):
        tree = SoftTree.build(3, depth=3, seed=2)
        with torch.no_grad():
            out = tree(images_to_tensor(tiny_v2.images))
        sums = out.leaf_probs.sum(dim=1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_prediction_is_distribution(self, tiny_v2):
        tree = SoftTree.build(3, depth=2, seed=4)
        with torch.no_grad():
            dist = tree.predict(images_to_tensor(tiny_v2.images))
        assert (dist >= 0).all()
        assert torch.allclose(dist.sum(dim=1), torch.ones(len(tiny_v2)), atol=1e-6)

    def test_depth_one_hand_computed(self):
        # p_right = 0.5 with delta leaf distributions -> (0.5, 0.5)
        tree = SoftTree.build(2, depth=1, seed=0)
        with torch.no_grad():
            tree.leaf_logits.copy_(torch.tensor([[50.0, -50.0], [-50.0, 50.0]]))
        p_right = torch.tensor([[0.5]])
        leaf_probs = tree.leaf_probabilities(p_right)
        mix = leaf_probs @ tree.leaf_distributions()
        assert torch.allclose(mix, torch.tensor([[0.5, 0.5]]), atol=1e-6)


class TestDecisionPath:
    def test_path_length_equals_depth(self, tiny_v2):
        for depth in (1, 2, 3):
            tree = SoftTree.build(3, depth=depth, seed=5)
            path = tree.extract_decision_path(images_to_tensor(tiny_v2.images)[0])
            assert len(path) == depth

    def test_planted_prototypes_all_present(self, tiny_v2):
        tree = SoftTree.build(3, depth=2, seed=6)
        tree.eval()
        img = images_to_tensor(tiny_v2.images)[0]
        with torch.no_grad():
            z = tree.extractor(img.unsqueeze(0))[0]
            # plant every node prototype somewhere in this image's latent map
            for j in range(tree.n_internal):
                tree.prototypes[j] = z[:, j % 8, (j * 3) % 8]
        path = tree.extract_decision_path(img)
        assert all(step.present for step in path.steps)
        assert [s.p_right for s in path.steps] == [pytest.approx(1.0)] * 2

    def test_flags_consistent_with_threshold(self, tiny_v2):
        tree = SoftTree.build(3, depth=3, seed=7)
        path = tree.extract_decision_path(images_to_tensor(tiny_v2.images)[1])
        node = 0
        for step in path.steps:
            assert step.node_id == node
            assert step.present == (step.p_right >= 0.5)
            node = 2 * node + 2 if step.present else 2 * node + 1
        assert path.leaf_index == node - tree.n_internal


class TestTrainTree:
    def test_zero_epochs_returns_initialized_tree(self, tiny_v2):
        cfg = TreeConfig(depth=2, warmup_epochs=0, joint_epochs=0, leaf_epochs=0, seed=11)
        result = train_tree(cfg, tiny_v2)
        assert result.history == []
        assert all(s is None for s in result.tree.sources)
        # rebuilding with the same config reproduces it exactly
        again = train_tree(cfg, tiny_v2)
        for a, b in zip(result.tree.state_dict().values(), again.tree.state_dict().values()):
            assert torch.equal(a, b)

    def test_determinism(self, tiny_v2):
        cfg = TreeConfig(depth=2, warmup_epochs=1, joint_epochs=1, leaf_epochs=1, seed=8)
        r1 = train_tree(cfg, tiny_v2)
        r2 = train_tree(cfg, tiny_v2)
        for a, b in zip(r1.tree.state_dict().values(), r2.tree.state_dict().values()):
            assert torch.equal(a, b)

    def test_projection_runs_and_is_idempotent(self, tiny_v2):
        cfg = TreeConfig(depth=2, warmup_epochs=1, joint_epochs=1, leaf_epochs=1, seed=9)
        result = train_tree(cfg, tiny_v2)
        tree = result.tree
        assert all(s is not None for s in tree.sources)
        before = tree.prototypes.detach().clone()
        project_tree_prototypes(tree, tiny_v2)
        assert torch.equal(before, tree.prototypes)

    def test_projection_fixed_point(self, tiny_v2):
        cfg = TreeConfig(depth=2, warmup_epochs=0, joint_epochs=1, leaf_epochs=0, seed=10)
        tree = train_tree(cfg, tiny_v2).tree
        images = images_to_tensor(tiny_v2.images)
        with torch.no_grad():
            for j, (img_idx, r, c) in enumerate(tree.sources):
                z = tree.extractor(images[img_idx : img_idx + 1])[0]
                d = ((z[:, r, c] - tree.prototypes[j]) ** 2).sum().item()
                assert d <= 1e-5


class TestTreeCheckpoint:
    def test_round_trip(self, tiny_v2, tmp_path):
        cfg = TreeConfig(depth=2, warmup_epochs=1, joint_epochs=1, leaf_epochs=1, seed=12)
        result = train_tree(cfg, tiny_v2)
        pt.save_tree_checkpoint(result.tree, tmp_path / "tree")
        loaded = pt.load_tree_checkpoint(tmp_path / "tree")
        img = images_to_tensor(tiny_v2.images[:3])
        with torch.no_grad():
            assert torch.equal(result.tree.predict(img), loaded.predict(img))
        assert loaded.sources == result.tree.sources
        assert loaded.depth == result.tree.depth

    def test_tree_json_structure(self, tiny_v2, tmp_path):
        import json

        tree = SoftTree.build(3, depth=2, seed=0)
        pt.save_tree_checkpoint(tree, tmp_path / "t")
        doc = json.loads((tmp_path / "t" / "tree.json").read_text())
        assert len(doc["nodes"]) == 3
        assert len(doc["leaf_distributions"]) == 4
        for row in doc["leaf_distributions"]:
            assert sum(row) == pytest.approx(1.0, abs=1e-6)
