"""Hash-grid encoders, shared decoders, sphere init, checkpoints."""

import numpy as np
import pytest

from sdfscene.autodiff import Tape, backward, fd_gradient, vsum
from sdfscene.fields import (
    AnalyticSceneField,
    AnalyticSphere,
    FieldConfig,
    FieldSet,
    SceneSpace,
    default_layout,
    load_checkpoint,
    prefit_spheres,
    save_checkpoint,
    space_from_graph,
)
from sdfscene.graph import parse_graph

import json


@pytest.fixture(scope="module")
def fitted():
    fs = FieldSet(2, seed=0)
    prefit_spheres(fs, steps=500, batch=512, seed=1)
    return fs


def small_config():
    return FieldConfig(levels=4, table_size=2 ** 12, base_resolution=4,
                       max_resolution=32, sdf_hidden=(16,), color_hidden=(16,))


class TestEncoder:
    def test_level_resolutions_span_base_to_max(self):
        res = FieldConfig().level_resolutions()
        assert res[0] == 16 and res[-1] == 256
        assert all(a < b for a, b in zip(res, res[1:]))

    def test_feature_dim_identical_across_objects(self):
        fs = FieldSet(3, config=small_config(), seed=0)
        p = np.zeros((5, 3))
        dims = {fs.encode(i, p).data.shape[1] for i in range(3)}
        assert dims == {fs.config.feature_dim}

    def test_vertex_feature_identity(self):
        fs = FieldSet(1, seed=0)
        f = fs.encode(0, np.array([[-1.0, -1.0, -1.0]]))
        expected = np.concatenate([t.data[0] for t in fs.encoders[0].tables])
        assert np.allclose(f.data[0], expected)

    def test_interpolation_weights_sum_to_one(self):
        # constant tables make the feature equal to that constant everywhere
        fs = FieldSet(1, config=small_config(), seed=0)
        for t in fs.encoders[0].tables:
            t.data[...] = 0.7
        pts = np.random.default_rng(0).uniform(-1, 1, size=(64, 3))
        f = fs.encode(0, pts)
        assert np.allclose(f.data, 0.7, atol=1e-5)

    def test_continuity(self):
        fs = FieldSet(1, seed=0)
        p = np.array([[0.123, -0.4, 0.77]])
        f0 = fs.encode(0, p).data
        prev = np.inf
        for d in (1e-2, 1e-4, 1e-6):
            df = np.abs(fs.encode(0, p + d).data - f0).max()
            assert df < prev or df == 0.0
            prev = df
        assert prev < 1e-7

    def test_objects_have_independent_features(self):
        fs = FieldSet(2, seed=0)
        p = np.random.default_rng(1).uniform(-1, 1, size=(10, 3))
        assert not np.allclose(fs.encode(0, p).data, fs.encode(1, p).data)

    def test_out_of_bounds_clamps(self):
        fs = FieldSet(1, config=small_config(), seed=0)
        inside = fs.sdf(0, np.array([[1.0, 1.0, 1.0]])).data
        outside = fs.sdf(0, np.array([[2.0, 3.0, 1.5]])).data
        assert np.allclose(inside, outside)

    def test_debug_mode_warns_on_out_of_bounds(self):
        fs = FieldSet(1, config=small_config(), seed=0, debug=True)
        with pytest.warns(UserWarning):
            fs.sdf(0, np.array([[2.0, 0.0, 0.0]]))


class TestDecoders:
    def test_color_in_unit_range(self):
        fs = FieldSet(1, seed=0)
        pts = np.random.default_rng(2).uniform(-1, 1, size=(200, 3))
        c = fs.color(0, pts).data
        assert c.shape == (200, 3) and c.min() >= 0.0 and c.max() <= 1.0

    def test_kappa_positive_and_trainable(self):
        fs = FieldSet(1, seed=0)
        assert float(fs.kappa().data) == pytest.approx(10.0, rel=1e-5)
        fs.log_kappa.data -= 100.0
        assert float(fs.kappa().data) > 0.0

    def test_sdf_gradients_match_fd(self):
        fs = FieldSet(2, config=small_config(), seed=0, dtype=np.float64)
        pts = np.random.default_rng(3).uniform(-1, 1, size=(8, 3))

        def f():
            u = fs.sdf(0, pts)
            return vsum(u * u)

        with Tape():
            backward(f(), fs.parameters())
        for name, p in fs.named_parameters():
            if name == "log_kappa" or name.startswith("color"):
                continue
            g = p.grad.reshape(-1)
            hot = np.argsort(-np.abs(g))[:12]
            if np.abs(g[hot]).max() == 0.0:
                continue
            idx, fd = fd_gradient(f, p, h=1e-5, indices=hot)
            rel = np.abs(g[idx] - fd) / np.maximum(np.abs(fd), 1e-8)
            assert rel.max() < 1e-4, (name, rel.max())

    def test_color_gradients_match_fd(self):
        fs = FieldSet(1, config=small_config(), seed=0, dtype=np.float64)
        pts = np.random.default_rng(4).uniform(-1, 1, size=(6, 3))
        target = np.full((6, 3), 0.25)

        def f():
            d = fs.color(0, pts) - target
            return vsum(d * d)

        with Tape():
            backward(f(), fs.parameters())
        for name, p in fs.named_parameters():
            if not name.startswith("color"):
                continue
            g = p.grad.reshape(-1)
            hot = np.argsort(-np.abs(g))[:12]
            idx, fd = fd_gradient(f, p, h=1e-5, indices=hot)
            rel = np.abs(g[idx] - fd) / np.maximum(np.abs(fd), 1e-8)
            assert rel.max() < 1e-4, (name, rel.max())

    def test_constant_color_fit(self):
        from sdfscene.autodiff import vmean
        from sdfscene.optim import Adam
        fs = FieldSet(1, config=small_config(), seed=5)
        opt = Adam(fs.optimizer_params(1e-2, 1e-3))
        rng = np.random.default_rng(6)
        target = np.array([0.8, 0.2, 0.5])
        for _ in range(500):
            pts = rng.uniform(-1, 1, size=(128, 3))
            with Tape():
                d = fs.color(0, pts) - target
                loss = vmean(d * d)
                opt.zero_grad()
                backward(loss, [v for _, v, _ in opt.params])
            opt.step()
        got = fs.color(0, rng.uniform(-1, 1, size=(200, 3))).data
        assert np.abs(got - target).max() < 1e-2

    def test_shared_decoder_parameter_coupling(self, fitted):
        pts = np.random.default_rng(7).uniform(-1, 1, size=(50, 3))
        u0 = fitted.sdf(0, pts).data.copy()
        u1 = fitted.sdf(1, pts).data.copy()
        # disturbing object 1's encoder leaves object 0 untouched
        tbl = fitted.encoders[1].tables[0]
        tbl.data += 0.05
        assert np.array_equal(fitted.sdf(0, pts).data, u0)
        assert not np.allclose(fitted.sdf(1, pts).data, u1)
        tbl.data -= 0.05
        # disturbing the shared decoder moves every object
        w = fitted.sdf_mlp.weights[0]
        w.data += 0.05
        assert not np.allclose(fitted.sdf(0, pts).data, u0)
        assert not np.allclose(fitted.sdf(1, pts).data, u1)
        w.data -= 0.05


class TestSphereInit:
    def test_default_layouts(self):
        lay1 = default_layout(1)
        assert np.allclose(lay1[0][0], 0.0) and lay1[0][1] == pytest.approx(0.5)
        lay2 = default_layout(2)
        c0, r0 = lay2[0]
        c1, r1 = lay2[1]
        assert r0 == r1 and np.allclose(c0, -c1)
        assert np.linalg.norm(c0 - c1) > r0 + r1   # disjoint
        for m in range(1, 9):
            lay = default_layout(m)
            for i, (ci, ri) in enumerate(lay):
                assert np.abs(ci).max() + ri <= 1.0 + 1e-9
                for cj, rj in lay[i + 1:]:
                    assert np.linalg.norm(ci - cj) > ri + rj - 1e-9

    def test_space_from_graph_overrides(self):
        g = parse_graph(json.dumps({
            "global_prompt": "p",
            "nodes": [
                {"name": "A", "init_center": [0.3, 0.0, 0.0], "init_radius": 0.2},
                {"name": "B"}],
            "edges": []}))
        space = space_from_graph(g, FieldConfig())
        assert np.allclose(space.spheres[0][0], [0.3, 0.0, 0.0])
        assert space.spheres[0][1] == pytest.approx(0.2)

    def test_infeasible_layout_rejected(self):
        with pytest.raises(ValueError):
            SceneSpace(bound=1.0, spheres=[(np.array([0.9, 0, 0]), 0.5)]).validate()

    def test_prefit_matches_sphere_geometry(self, fitted):
        rng = np.random.default_rng(8)
        for i, (c, r) in enumerate(fitted.space.spheres):
            u_center = float(fitted.sdf(i, c[None, :]).data[0])
            assert abs(u_center + r) < 0.05 * r
            u_surf = float(fitted.sdf(i, (c + [r, 0.0, 0.0])[None, :]).data[0])
            assert abs(u_surf) < 0.05 * r
            pts = rng.uniform(-1, 1, size=(1000, 3))
            oracle = AnalyticSphere(c, r)
            assert np.abs(fitted.sdf(i, pts).data - oracle.sdf_np(pts)).mean() < 0.02

    def test_prefit_sign_correctness(self, fitted):
        rng = np.random.default_rng(9)
        for i, (c, r) in enumerate(fitted.space.spheres):
            dirs = rng.normal(size=(200, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            inside = c + dirs * rng.uniform(0.0, 0.85 * r, size=(200, 1))
            assert (fitted.sdf(i, inside).data < 0).all()
            outside = np.clip(
                c + dirs * rng.uniform(1.1 * r, 2.0 * r, size=(200, 1)), -1, 1)
            keep = np.linalg.norm(outside - c, axis=1) > 1.1 * r
            assert (fitted.sdf(i, outside).data[keep] > 0).all()


class TestSpatialGradient:
    def test_analytic_sphere_gradient_is_unit_normal(self):
        sph = AnalyticSphere([0.1, -0.2, 0.0], 0.4)
        field = AnalyticSceneField([sph])
        rng = np.random.default_rng(10)
        pts = sph.center + rng.normal(size=(100, 3)) * 0.3
        g = field.spatial_gradient(0, pts, h=1e-3).data
        n = sph.normal_np(pts)
        assert np.abs(g - n).max() < 1e-3

    def test_probe_gradient_plumbing(self, fitted):
        rng = np.random.default_rng(11)
        pts = rng.uniform(-0.6, 0.6, size=(40, 3))
        h = 5e-3
        g = fitted.spatial_gradient(0, pts, h=h).data
        ref = np.empty_like(g)
        for a in range(3):
            off = np.zeros(3)
            off[a] = h
            up = fitted.sdf(0, pts + off).data
            dn = fitted.sdf(0, pts - off).data
            ref[:, a] = (up - dn) / (2 * h)
        assert np.allclose(g, ref, atol=1e-6)

    def test_fitted_gradient_points_outward(self, fitted):
        # the raw pre-fit is noisy at fine scales (no Eikonal term yet), but
        # at a coarse probe the gradient should track the sphere normal
        rng = np.random.default_rng(12)
        c, r = fitted.space.spheres[0]
        sph = AnalyticSphere(c, r)
        pts = c + rng.normal(size=(300, 3)) * 0.5 * r
        pts = pts[np.linalg.norm(pts - c, axis=1) > 0.1 * r]
        g = fitted.spatial_gradient(0, pts, h=2e-2).data
        gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-9)
        cos = np.sum(gn * sph.normal_np(pts), axis=1)
        assert cos.mean() > 0.85


class TestCheckpoint:
    def test_round_trip_bit_exact(self, fitted, tmp_path):
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, fitted, extra={"step": 41, "note": "x"})
        loaded, extra = load_checkpoint(path)
        assert extra == {"step": 41, "note": "x"}
        a = dict(fitted.named_parameters())
        b = dict(loaded.named_parameters())
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k].data, b[k].data), k
        pts = np.random.default_rng(13).uniform(-1, 1, size=(20, 3))
        assert np.array_equal(fitted.sdf(0, pts).data, loaded.sdf(0, pts).data)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError):
            load_checkpoint(p)
