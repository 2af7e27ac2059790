"""Loss values against scalar-loop oracles; routing per dataset type."""

import numpy as np
import pytest

from crossmesh import tensor as tt
from crossmesh.config import LossWeights, SAMPLE_TYPES
from crossmesh.keypoints import HeatmapSet
from crossmesh.losses import (LossReport, active_terms, loss_consistency, loss_joint,
                              loss_joint_reg, loss_map, loss_reproj, loss_vertex, total_loss)
from crossmesh.mesh_head import JointRegressor, MeshPrediction, WeakPerspectiveCamera
from crossmesh.tensor import ContractViolation, DimensionError, Tensor, backward, tape_scope

from oracles import (consistency_oracle, gradcheck, loss_map_oracle, point_l1_oracle,
                     reproj_oracle)


def heatmaps(rng, k=3, hw=(8, 8)):
    return HeatmapSet(rng.random((k, *hw)), rng.uniform(-2, 2, size=(k, 2, *hw)))


class TestLossMap:
    def test_identical_is_zero(self, rng):
        m = heatmaps(rng)
        assert loss_map(m, m, np.ones(3)).item() == 0.0

    def test_all_invisible_is_zero(self, rng):
        a, b = heatmaps(rng), heatmaps(rng)
        assert loss_map(a, b, np.zeros(3)).item() == 0.0

    def test_half_offset_everywhere(self, rng):
        gt = HeatmapSet(rng.random((1, 8, 8)), np.zeros((1, 2, 8, 8)))
        pred = HeatmapSet(gt.heatmaps + 0.5, gt.offsets)
        assert loss_map(pred, gt, np.ones(1)).item() == pytest.approx(0.5, abs=1e-12)

    def test_matches_scalar_loop_oracle(self, rng):
        a, b = heatmaps(rng, k=4), heatmaps(rng, k=4)
        w = rng.random(4)
        got = loss_map(a, b, w).item()
        want = loss_map_oracle(a.heatmaps, a.offsets, b.heatmaps, b.offsets, w)
        assert got == pytest.approx(want, abs=1e-10)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            loss_map(heatmaps(rng, k=3), heatmaps(rng, k=4), np.ones(3))


class TestPointLosses:
    def test_identical_zero(self, rng):
        v = rng.normal(size=(7, 3))
        assert loss_vertex(v, v).item() == 0.0
        assert loss_joint(v, v).item() == 0.0

    def test_single_coordinate_offset_gives_one_over_m(self, rng):
        m = 12
        gt = rng.normal(size=(m, 3))
        pred = gt.copy()
        pred[4, 1] += 1.0
        assert loss_vertex(pred, gt).item() == pytest.approx(1.0 / m, abs=1e-12)

    def test_matches_scalar_loop_oracle(self, rng):
        a, b = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
        assert loss_vertex(a, b).item() == pytest.approx(point_l1_oracle(a, b), abs=1e-10)
        assert loss_joint(a, b).item() == pytest.approx(point_l1_oracle(a, b), abs=1e-10)


class TestJointRegLoss:
    def _reg(self, rng, k=4, m=10):
        w = rng.random((k, m))
        w /= w.sum(axis=1, keepdims=True)
        return JointRegressor(w)

    def test_consistent_target_gives_zero(self, rng):
        reg = self._reg(rng)
        v = rng.normal(size=(10, 3))
        assert loss_joint_reg(v, reg.weights @ v, reg).item() == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_reduces_to_joint_loss(self, rng):
        w = np.zeros((2, 6))
        w[0, 1] = w[1, 4] = 1.0
        v = rng.normal(size=(6, 3))
        gt = rng.normal(size=(2, 3))
        assert loss_joint_reg(v, gt, JointRegressor(w)).item() == pytest.approx(
            loss_joint(v[[1, 4]], gt).item(), abs=1e-12)

    def test_composition_oracle(self, rng):
        reg = self._reg(rng)
        v, gt = rng.normal(size=(10, 3)), rng.normal(size=(4, 3))
        want = point_l1_oracle(reg.weights @ v, gt)
        assert loss_joint_reg(v, gt, reg).item() == pytest.approx(want, abs=1e-10)

    def test_gradient_reaches_vertices(self, rng):
        reg = self._reg(rng)
        v = Tensor(rng.normal(size=(10, 3)), requires_grad=True)
        with tape_scope():
            backward(loss_joint_reg(v, rng.normal(size=(4, 3)), reg))
        assert v.grad is not None and np.linalg.norm(v.grad) > 0


class TestReprojLoss:
    def test_perfect_projection_zero(self, rng):
        j = rng.normal(size=(5, 3))
        cam = WeakPerspectiveCamera(1.3, np.array([0.2, -0.1]))
        gt = 1.3 * j[:, :2] + [0.2, -0.1]
        assert loss_reproj(j, cam, gt, np.ones(5)).item() == pytest.approx(0.0, abs=1e-12)

    def test_stated_convention_single_joint(self):
        """(1, 2, z) vs (0, 0) at s=1, t=0 -> mean(|1|, |2|) = 1.5."""
        cam = WeakPerspectiveCamera(1.0, np.zeros(2))
        out = loss_reproj(np.array([[1.0, 2.0, 7.0]]), cam, np.zeros((1, 2)), np.ones(1))
        assert out.item() == pytest.approx(1.5, abs=1e-12)

    def test_depth_perturbation_changes_nothing(self, rng):
        j = rng.normal(size=(4, 3))
        j2 = j.copy()
        j2[:, 2] = rng.normal(size=4)
        cam = WeakPerspectiveCamera(0.8, np.zeros(2))
        gt = rng.normal(size=(4, 2))
        assert loss_reproj(j, cam, gt, np.ones(4)).item() == loss_reproj(j2, cam, gt, np.ones(4)).item()

    def test_all_invisible_zero_loss_and_gradient(self, rng):
        j = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        cam = WeakPerspectiveCamera(Tensor(1.0, requires_grad=True),
                                    Tensor(np.zeros(2), requires_grad=True))
        with tape_scope():
            out = loss_reproj(j, cam, rng.normal(size=(4, 2)), np.zeros(4))
            backward(out)
        assert out.item() == 0.0
        assert np.abs(j.grad).max() == 0.0

    def test_matches_scalar_loop_oracle(self, rng):
        j = rng.normal(size=(6, 3))
        s, t = 1.4, rng.normal(size=2)
        gt = rng.normal(size=(6, 2))
        vis = (rng.random(6) > 0.3).astype(float)
        got = loss_reproj(j, WeakPerspectiveCamera(s, t), gt, vis).item()
        assert got == pytest.approx(reproj_oracle(j, s, t, gt, vis), abs=1e-10)


class TestConsistencyLoss:
    def test_equal_inputs_zero(self, rng):
        a = rng.normal(size=(5, 8))
        assert loss_consistency(a, a.copy()).item() == 0.0

    def test_all_ones_difference_gives_sqrt_d(self, rng):
        t, d = 6, 9
        a = rng.normal(size=(t, d))
        out = loss_consistency(a + 1.0, a)
        assert out.item() == pytest.approx(np.sqrt(d), abs=1e-12)

    def test_matches_oracle(self, rng):
        a, b = rng.normal(size=(4, 7)), rng.normal(size=(4, 7))
        assert loss_consistency(a, b).item() == pytest.approx(consistency_oracle(a, b), abs=1e-10)

    def test_gradients_flow_to_both_inputs(self, rng):
        a = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        with tape_scope():
            backward(loss_consistency(a, b))
        assert np.linalg.norm(a.grad) > 0 and np.linalg.norm(b.grad) > 0
        np.testing.assert_allclose(a.grad, -b.grad, atol=1e-12)

    def test_absent_attended_feature_rejected(self, rng):
        with pytest.raises(ContractViolation):
            loss_consistency(None, rng.normal(size=(3, 5)))


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_losses_pass_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        gt_h = rng.random((2, 5, 5))
        gt_o = rng.uniform(-2, 2, size=(2, 2, 5, 5))
        w = rng.random(2)

        def f_map(h, o):
            return loss_map(HeatmapSet(h, o), HeatmapSet(Tensor(gt_h), Tensor(gt_o)), w)

        gradcheck(f_map, [rng.random((2, 5, 5)) + 0.1, rng.uniform(-1.5, 1.5, size=(2, 2, 5, 5))],
                  coords_per_input=10)

        gt_v = rng.normal(size=(6, 3))
        gradcheck(lambda v: loss_vertex(v, Tensor(gt_v)), [gt_v + rng.normal(size=(6, 3))],
                  coords_per_input=10)

        gt2 = rng.normal(size=(4, 2))

        def f_reproj(j, s, t):
            return loss_reproj(j, WeakPerspectiveCamera(s, t), Tensor(gt2), np.ones(4))

        gradcheck(f_reproj, [rng.normal(size=(4, 3)), np.array(1.3), rng.normal(size=2)],
                  coords_per_input=10)

        gradcheck(lambda a, b: loss_consistency(a, b),
                  [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], coords_per_input=10)


class TestRouting:
    def test_image_3d_has_all_terms(self):
        names = active_terms("image_3d", ("kp", "img"))
        assert sorted(names) == sorted([
            "map", "kp_vertex", "kp_joint", "kp_joint_reg", "kp_reproj",
            "img_vertex", "img_joint", "img_joint_reg", "img_reproj", "consistency"])

    def test_pseudo3d_routes_like_3d(self):
        assert active_terms("image_pseudo3d", ("kp", "img")) == active_terms("image_3d", ("kp", "img"))

    def test_2d_only_exactly_four_terms(self):
        names = active_terms("image_2d_only", ("kp", "img"))
        assert sorted(names) == ["consistency", "img_reproj", "kp_reproj", "map"]

    def test_mocap_exactly_four_keypoint_terms(self):
        names = active_terms("mocap", ("kp", "img"))
        assert sorted(names) == ["kp_joint", "kp_joint_reg", "kp_reproj", "kp_vertex"]

    def test_mocap_reproj_flag(self):
        names = active_terms("mocap", ("kp", "img"), mocap_reproj=False)
        assert sorted(names) == ["kp_joint", "kp_joint_reg", "kp_vertex"]

    def test_consistency_disabled(self):
        names = active_terms("image_2d_only", ("kp", "img"), use_consistency=False)
        assert "consistency" not in names

    def test_every_type_maps_to_exactly_one_set(self):
        seen = {}
        for t in SAMPLE_TYPES:
            seen[t] = tuple(sorted(active_terms(t, ("kp", "img"))))
        assert len(seen) == len(SAMPLE_TYPES)
        assert all(seen.values())

    def test_unknown_type_rejected(self):
        with pytest.raises(ValueError):
            active_terms("video", ("kp", "img"))


def _prediction(rng, branch, m_full=10, k=4):
    return MeshPrediction(
        Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(m_full, 3))),
        Tensor(rng.normal(size=(k, 3))),
        WeakPerspectiveCamera(Tensor(1.0), Tensor(np.zeros(2))), branch)


class TestTotalLoss:
    def _setup(self, rng):
        w = rng.random((4, 10))
        w /= w.sum(axis=1, keepdims=True)
        reg = JointRegressor(w)
        outputs = {
            "kp": _prediction(rng, "kp"), "img": _prediction(rng, "img"),
            "maps": HeatmapSet(Tensor(rng.random((3, 4, 4))),
                               Tensor(rng.uniform(-2, 2, size=(3, 2, 4, 4)))),
            "consistency_pairs": [(Tensor(rng.normal(size=(5, 6))), Tensor(rng.normal(size=(5, 6))))],
        }
        targets = {
            "maps": HeatmapSet(rng.random((3, 4, 4)), rng.uniform(-2, 2, size=(3, 2, 4, 4))),
            "kp_vis": np.ones(3),
            "vertices": rng.normal(size=(10, 3)),
            "joints": rng.normal(size=(4, 3)),
            "joints_2d": rng.normal(size=(4, 2)),
            "joints_2d_vis": np.ones(4),
        }
        return outputs, targets, reg

    def test_total_is_weighted_sum(self, rng):
        outputs, targets, reg = self._setup(rng)
        weights = LossWeights(heatmaps=2.0, vertex=0.5, joint=1.5, joint_reg=0.25,
                              reproj=3.0, consistency=0.75)
        total, report = total_loss("image_3d", outputs, targets, weights, reg)
        by_kind = {"map": 2.0, "vertex": 0.5, "joint": 1.5, "joint_reg": 0.25,
                   "reproj": 3.0, "consistency": 0.75}
        want = 0.0
        for name, val in report.terms.items():
            kind = name.split("_", 1)[1] if name.split("_", 1)[0] in ("kp", "img") else name
            want += by_kind[kind] * val
        assert total.item() == pytest.approx(want, rel=1e-12)

    def test_perfect_predictions_give_zero_total(self, rng):
        outputs, targets, reg = self._setup(rng)
        targets["vertices"] = outputs["kp"].vertices_full.numpy().copy()
        targets["joints"] = outputs["kp"].joints.numpy().copy()
        outputs["img"] = outputs["kp"]
        targets["joints"] = outputs["kp"].joints.numpy()
        targets["vertices"] = outputs["kp"].vertices_full.numpy()
        targets["joints_2d"] = outputs["kp"].joints.numpy()[:, :2].copy()
        targets["maps"] = HeatmapSet(outputs["maps"].heatmaps.numpy().copy(),
                                     outputs["maps"].offsets.numpy().copy())
        pair = outputs["consistency_pairs"][0][0]
        outputs["consistency_pairs"] = [(pair, Tensor(pair.numpy().copy()))]
        # the only nonzero term left is joint_reg unless W V == J; force it
        targets["joints"] = (reg.weights @ outputs["kp"].vertices_full.numpy())
        outputs["kp"].joints = Tensor(targets["joints"].copy())
        outputs["img"].joints = outputs["kp"].joints
        targets["joints_2d"] = targets["joints"][:, :2].copy()
        total, report = total_loss("image_3d", outputs, targets, LossWeights(), reg)
        assert total.item() == pytest.approx(0.0, abs=1e-12)
        assert all(v == pytest.approx(0.0, abs=1e-12) for v in report.terms.values())

    def test_mocap_report_has_exactly_four_terms(self, rng):
        outputs, targets, reg = self._setup(rng)
        outputs["img"] = None
        outputs["maps"] = None
        outputs["consistency_pairs"] = []
        targets["maps"] = None
        total, report = total_loss("mocap", outputs, targets, LossWeights(), reg)
        assert sorted(report.terms) == ["kp_joint", "kp_joint_reg", "kp_reproj", "kp_vertex"]

    def test_2d_only_report_has_exactly_four_terms(self, rng):
        outputs, targets, reg = self._setup(rng)
        targets["vertices"] = None
        targets["joints"] = None
        total, report = total_loss("image_2d_only", outputs, targets, LossWeights(), reg)
        assert sorted(report.terms) == ["consistency", "img_reproj", "kp_reproj", "map"]

    def test_missing_targets_rejected(self, rng):
        outputs, targets, reg = self._setup(rng)
        targets["vertices"] = None
        with pytest.raises(ContractViolation):
            total_loss("image_3d", outputs, targets, LossWeights(), reg)

    def test_mocap_without_keypoint_branch_rejected(self, rng):
        outputs, targets, reg = self._setup(rng)
        outputs["kp"] = None
        with pytest.raises(ContractViolation):
            total_loss("mocap", outputs, targets, LossWeights(), reg)

    def test_inactive_terms_absent_not_zero(self, rng):
        outputs, targets, reg = self._setup(rng)
        outputs["img"] = None
        outputs["maps"] = None
        outputs["consistency_pairs"] = []
        targets["maps"] = None
        _, report = total_loss("mocap", outputs, targets, LossWeights(), reg)
        assert "map" not in report.terms and "consistency" not in report.terms

    def test_report_str_mentions_terms(self, rng):
        outputs, targets, reg = self._setup(rng)
        _, report = total_loss("image_3d", outputs, targets, LossWeights(), reg)
        assert "total=" in str(report) and "kp_vertex=" in str(report)
