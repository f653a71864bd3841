"""Objective assembly oracles: penetration, Eikonal, and step-plan routing."""

import numpy as np
import pytest

from sdfscene.autodiff import Tape, Value, as_value, backward
from sdfscene.fields import (
    AnalyticSceneField,
    AnalyticSphere,
    FieldConfig,
    FieldSet,
    SceneSpace,
    prefit_spheres,
)
from sdfscene.graph import StepPlan
from sdfscene.guidance import PhotometricProvider
from sdfscene.losses import (
    LOSS_CSV_COLUMNS,
    LossError,
    eikonal_loss,
    penetration_count,
    penetration_loss,
    subsample_points,
    total_loss,
)
from sdfscene.optim import Adam
from sdfscene.render import Camera, SceneRenderer, identity_vector


def pen_loss_np(u):
    """Loss for a raw (P, M) SDF matrix with hard ownership."""
    uv = Value(np.asarray(u, dtype=np.float64))
    lam = identity_vector(uv, mode="hard")
    return float(penetration_loss(uv, lam).data)


class TestPenetrationLoss:
    def test_single_point_reference_value(self):
        got = pen_loss_np([[-0.3, 0.1]])
        # owner depth 0.3, non-owner penalty relu(0.3 - 0.1)^2
        assert got == (np.float64(0.3) - np.float64(0.1)) ** 2
        assert abs(got - 0.04) < 1e-16

    def test_point_outside_all_objects_is_free(self):
        assert pen_loss_np([[0.2, 0.5]]) == 0.0

    def test_single_object_scene_has_no_penalty(self):
        u = Value(np.array([[-0.5], [0.2]]))
        lam = identity_vector(u)
        assert float(penetration_loss(u, lam).data) == 0.0

    def test_normalization_over_points_and_objects(self):
        # two identical penetrating points, M=3: owner depth 0.2 penalizes
        # the two non-owners at relu(0.2 - u_j)^2 each
        row = [-0.2, 0.1, 0.4]
        one = pen_loss_np([row])
        expect = ((0.2 - 0.1) ** 2 + (0.2 - 0.4 if 0.2 > 0.4 else 0.0)) / 2.0
        assert np.isclose(one, ((np.float64(0.2) - 0.1) ** 2) / 2.0)
        assert np.isclose(one, expect)
        two = pen_loss_np([row, row])
        assert np.isclose(two, one)   # mean over points

    def test_disjoint_spheres_have_zero_loss(self):
        field = AnalyticSceneField([AnalyticSphere((-0.5, 0, 0), 0.3),
                                    AnalyticSphere((0.5, 0, 0), 0.3)])
        pts = np.random.default_rng(0).uniform(-1, 1, size=(4096, 3))
        u = field.sdf_all(pts)
        assert float(penetration_loss(u, identity_vector(u)).data) == 0.0

    def test_overlapping_spheres_have_positive_loss(self):
        field = AnalyticSceneField([AnalyticSphere((-0.1, 0, 0), 0.3),
                                    AnalyticSphere((0.1, 0, 0), 0.3)])
        pts = np.random.default_rng(1).uniform(-0.5, 0.5, size=(4096, 3))
        u = field.sdf_all(pts)
        assert float(penetration_loss(u, identity_vector(u)).data) > 1e-5

    def test_object_order_permutation_invariance(self):
        rng = np.random.default_rng(2)
        u = rng.normal(scale=0.3, size=(256, 4))
        perm = [2, 0, 3, 1]
        assert np.isclose(pen_loss_np(u), pen_loss_np(u[:, perm]),
                          rtol=0, atol=1e-15)

    def test_zero_iff_naive_zero(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            u = rng.normal(scale=0.4, size=(32, 3))
            u[np.abs(u) < 1e-6] = 1e-3    # keep clear of the sign boundary
            refined = pen_loss_np(u)
            naive = penetration_count(u).naive_loss
            assert (refined == 0.0) == (naive == 0.0)

    def test_gradient_pushes_non_owner_outward(self):
        u0 = np.array([[-0.3, -0.1]])
        with Tape():
            u = Value(u0.copy(), requires_grad=True)
            loss = penetration_loss(u, identity_vector(u))
            backward(loss, [u])
            g = u.grad.copy()
        # non-owner (index 1) is inside the owner's depth: increasing u_1
        # lowers the loss, so its gradient must be negative
        assert g[0, 1] < 0.0


class TestPenetrationCount:
    def test_sign_counting_examples(self):
        r = penetration_count(np.array([[-0.1, -0.2, 0.3]]))
        assert r.counts.tolist() == [2]
        assert r.naive_loss == 1.0
        r = penetration_count(np.array([[0.1, 0.2, 0.3]]))
        assert r.counts.tolist() == [0]
        assert r.naive_loss == 0.0
        r = penetration_count(np.array([[-0.1, 0.2]]))
        assert r.counts.tolist() == [1]
        assert r.naive_loss == 0.0

    def test_surface_points_count_as_outside(self):
        r = penetration_count(np.array([[0.0, -0.2], [0.0, 0.0]]))
        assert r.counts.tolist() == [1, 0]

    def test_histogram_partitions_points(self):
        rng = np.random.default_rng(4)
        u = rng.normal(size=(500, 3))
        r = penetration_count(u)
        assert r.histogram.sum() == 500
        assert r.histogram.size == 4
        assert r.counts.max() <= 3
        assert r.worst == r.counts.max()


class TestEikonalLoss:
    def test_analytic_sphere_is_unit_gradient(self):
        field = AnalyticSceneField([AnalyticSphere((0, 0, 0), 0.5)])
        rng = np.random.default_rng(5)
        pts = rng.uniform(-1, 1, size=(2000, 3))
        pts = pts[np.linalg.norm(pts, axis=1) > 0.15][:1000]
        loss = float(eikonal_loss(field, pts).data)
        assert loss < 1e-8

    def test_doubled_field_pays_unit_penalty(self):
        base = AnalyticSceneField([AnalyticSphere((0, 0, 0), 0.5)])

        class Doubled:
            def eval_all(self, points, color_objects=()):
                u_rows, colors = base.eval_all(points, color_objects)
                return [2.0 * u for u in u_rows], colors

        rng = np.random.default_rng(6)
        pts = rng.uniform(-1, 1, size=(2000, 3))
        pts = pts[np.linalg.norm(pts, axis=1) > 0.2][:500]
        loss = float(eikonal_loss(Doubled(), pts).data)
        assert abs(loss - 1.0) < 1e-3

    def test_object_order_permutation_invariance(self):
        spheres = [AnalyticSphere((-0.4, 0, 0), 0.25),
                   AnalyticSphere((0.3, 0.1, 0), 0.3),
                   AnalyticSphere((0, 0, 0.4), 0.2)]
        pts = np.random.default_rng(7).uniform(-0.9, 0.9, size=(400, 3))
        a = float(eikonal_loss(AnalyticSceneField(spheres), pts).data)
        b = float(eikonal_loss(
            AnalyticSceneField([spheres[2], spheres[0], spheres[1]]), pts).data)
        assert np.isclose(a, b, rtol=0, atol=1e-15)

    def test_empty_points_rejected(self):
        field = AnalyticSceneField([AnalyticSphere((0, 0, 0), 0.5)])
        with pytest.raises(LossError):
            eikonal_loss(field, np.zeros((0, 3)))

    def test_pure_eikonal_optimization_decreases_loss(self):
        fields = FieldSet(1, seed=9)
        opt = Adam(fields.optimizer_params(1e-2, 1e-3))
        rng = np.random.default_rng(10)
        history = []
        for _ in range(200):
            pts = rng.uniform(-1, 1, size=(256, 3))
            with Tape():
                loss = eikonal_loss(fields, pts)
                opt.zero_grad()
                backward(loss, [v for _, v, _ in opt.params])
                opt.step()
            history.append(float(loss.data))
        assert np.mean(history[-20:]) < 0.5 * np.mean(history[:20])


class TestSubsampling:
    def test_small_sets_pass_through(self):
        pts = np.arange(30, dtype=float).reshape(10, 3)
        assert np.array_equal(subsample_points(pts, 64), pts)

    def test_strided_subset_size_and_membership(self):
        pts = np.random.default_rng(11).random((1000, 3))
        sub = subsample_points(pts, 64, step=3)
        assert sub.shape == (64, 3)
        rows = {tuple(r) for r in pts}
        assert all(tuple(r) in rows for r in sub)

    def test_offset_rotates_with_step(self):
        pts = np.random.default_rng(12).random((1024, 3))
        a = subsample_points(pts, 64, step=0)
        b = subsample_points(pts, 64, step=1)
        assert not np.array_equal(a, b)


def step_fixture(m=2, seed=0):
    fields = FieldSet(m, seed=seed)
    renderer = SceneRenderer(fields, n_samples=16)
    cam = Camera(position=(0, -2.5, 0), width=6, height=6, fov_y=40)
    return fields, renderer, cam


def flat_targets(prompts, h=6, w=6, value=0.5):
    return PhotometricProvider(
        {p: np.full((h, w, 3), value) for p in prompts})


class TestTotalLoss:
    def test_object_step_carries_two_injections(self):
        fields, r, cam = step_fixture()
        plan = StepPlan(step=0, kind="object", object_index=0, edge=(0, 1))
        provider = flat_targets(["obj", "edge"])
        with Tape():
            obj = r.render_object(0, cam, want_aux=True)
            edge = r.render_edge(0, 1, cam)
            bundle = total_loss(plan, [obj, edge], ["obj", "edge"], fields,
                                provider, obj.aux)
            assert bundle.sds_count == 2
            assert float(bundle.penetration.data) >= 0.0
            assert float(bundle.eikonal.data) >= 0.0
            backward(bundle.objective, fields.parameters())
        assert any(np.any(p.grad != 0) for p in fields.parameters())

    def test_global_step_carries_one_injection(self):
        fields, r, cam = step_fixture()
        plan = StepPlan(step=2, kind="global")
        provider = flat_targets(["scene"])
        with Tape():
            scene = r.render_scene(cam, want_aux=True)
            bundle = total_loss(plan, [scene], ["scene"], fields, provider,
                                scene.aux)
        assert bundle.sds_count == 1

    def test_object_step_without_edges_has_single_injection(self):
        fields, r, cam = step_fixture(m=1)
        plan = StepPlan(step=0, kind="object", object_index=0, edge=None)
        provider = flat_targets(["obj"])
        with Tape():
            obj = r.render_object(0, cam, want_aux=True)
            bundle = total_loss(plan, [obj], ["obj"], fields, provider, obj.aux)
        assert bundle.sds_count == 1
        assert float(bundle.penetration.data) == 0.0

    def test_mismatched_renders_rejected(self):
        fields, r, cam = step_fixture()
        provider = flat_targets(["a", "b"])
        with Tape():
            obj = r.render_object(0, cam, want_aux=True)
            edge = r.render_edge(0, 1, cam)
            scene = r.render_scene(cam)
            plan = StepPlan(step=0, kind="object", object_index=0, edge=(0, 1))
            with pytest.raises(LossError):
                total_loss(plan, [obj], ["a"], fields, provider, obj.aux)
            with pytest.raises(LossError):
                total_loss(plan, [edge, obj], ["a", "b"], fields, provider,
                           obj.aux)
            with pytest.raises(LossError):
                total_loss(StepPlan(step=2, kind="global"), [obj], ["a"],
                           fields, provider, obj.aux)
            with pytest.raises(LossError):
                total_loss(StepPlan(step=0, kind="object", object_index=1,
                                    edge=(0, 1)), [obj, edge], ["a", "b"],
                           fields, provider, obj.aux)

    def test_negative_coefficients_rejected(self):
        fields, r, cam = step_fixture()
        provider = flat_targets(["scene"])
        with Tape():
            scene = r.render_scene(cam, want_aux=True)
            with pytest.raises(LossError):
                total_loss(StepPlan(step=2, kind="global"), [scene], ["scene"],
                           fields, provider, scene.aux,
                           coefficients=(1.0, -1.0, 10.0))
            with pytest.raises(LossError):
                total_loss(StepPlan(step=2, kind="global"), [scene], ["scene"],
                           fields, provider, scene.aux,
                           coefficients=(0.0, 100.0, 10.0))

    def test_csv_row_schema(self):
        fields, r, cam = step_fixture()
        provider = flat_targets(["scene"])
        with Tape():
            scene = r.render_scene(cam, want_aux=True)
            bundle = total_loss(StepPlan(step=2, kind="global"), [scene],
                                ["scene"], fields, provider, scene.aux)
        row = bundle.csv_row(2, "global")
        assert len(row) == len(LOSS_CSV_COLUMNS)
        assert row[0] == 2 and row[1] == "global" and row[2] == 1
        assert all(np.isfinite(v) for v in row[3:])

    def test_zero_residual_yields_zero_sds_gradient(self):
        fields, r, cam = step_fixture()
        with Tape():
            scene = r.render_scene(cam, want_aux=True)
            provider = PhotometricProvider(
                {"scene": scene.rgb_array.astype(np.float64)})
            bundle = total_loss(StepPlan(step=2, kind="global"), [scene],
                                ["scene"], fields, provider, scene.aux)
        assert np.all(bundle.sds_terms[0].residual == 0.0)


class TestPenetrationOptimization:
    def test_overlap_shrinks_under_pure_penetration(self):
        config = FieldConfig()
        space = SceneSpace(bound=1.0, spheres=[((-0.1, 0, 0), 0.3),
                                               ((0.1, 0, 0), 0.3)])
        fields = FieldSet(2, config=config, space=space, seed=21)
        prefit_spheres(fields, steps=400, batch=512, seed=22)

        eval_pts = np.random.default_rng(23).uniform(-1, 1, size=(20000, 3))

        def overlap_fraction():
            u = fields.sdf_all(eval_pts).data
            return float(np.mean((u[:, 0] < 0) & (u[:, 1] < 0)))

        before = overlap_fraction()
        assert before > 0.002   # the prefit really does overlap

        opt = Adam(fields.optimizer_params(1e-2, 1e-3))
        rng = np.random.default_rng(24)
        for _ in range(150):
            pts = rng.uniform(-1, 1, size=(1024, 3))
            with Tape():
                u = fields.sdf_all(pts)
                loss = penetration_loss(u, identity_vector(u))
                opt.zero_grad()
                backward(loss, [v for _, v, _ in opt.params])
                opt.step()
        after = overlap_fraction()
        assert after < 0.6 * before
