import math

import numpy as np
import pytest
import torch

from vectorsketch.animate import (
    IDENTITY_PARAMS,
    AnimateConfig,
    FrameSet,
    LambdaScales,
    VideoBackends,
    bbox_center,
    center_of_mass_path,
    compose_global_transform,
    explicit_translation,
    global_displacements,
    make_motion_field,
    optimize_animation,
    pearson,
    positional_encoding,
    predict_displacements,
    read_displacements,
    render_video,
    write_displacements,
)
from vectorsketch.errors import DomainError
from vectorsketch.guidance import NoiseSchedule
from vectorsketch.mocks import TargetPullingVideoPredictor
from vectorsketch.raster import render

from conftest import random_sketch


def random_params(rng, k=None):
    shape = (7,) if k is None else (k, 7)
    return torch.tensor(np.asarray(IDENTITY_PARAMS) + rng.normal(0, 0.5, shape))


def perturbed_field(n, k, hidden=16, seed=0):
    fld = make_motion_field(n, k, hidden, seed)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in fld.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return fld


class TestEncoding:
    def test_zero_phase(self):
        pe = positional_encoding(0, 0, 8)
        assert torch.equal(pe, torch.tensor([0.0, 1.0] * 4, dtype=torch.float64))

    def test_distinct(self):
        assert float(torch.linalg.norm(positional_encoding(0, 0, 8) - positional_encoding(1, 0, 8))) > 0
        assert float(torch.linalg.norm(positional_encoding(0, 0, 8) - positional_encoding(0, 1, 8))) > 0

    def test_dot_table(self):
        dim = 12
        fr = torch.arange(4, dtype=torch.float64)[:, None]
        pt = torch.arange(3, dtype=torch.float64)[None, :]
        table = positional_encoding(fr, pt, dim).reshape(12, dim)
        # direct recomputation: 3 frame pairs then 3 point pairs, interleaved (sin, cos)
        ref = np.zeros((12, dim))
        for f in range(4):
            for p in range(3):
                phase = [f * 10000.0 ** (-i / 3) for i in range(3)] + [p * 10000.0 ** (-i / 3) for i in range(3)]
                ref[f * 3 + p] = np.ravel([[math.sin(x), math.cos(x)] for x in phase])
        np.testing.assert_allclose((table @ table.T).numpy(), ref @ ref.T, atol=1e-12)

    def test_odd_dim(self):
        with pytest.raises(DomainError):
            positional_encoding(0, 0, 7)


class TestTransforms:
    def test_identity_params_give_identity(self):
        rng = np.random.default_rng(0)
        for lam in (LambdaScales(), LambdaScales(3, 2, 1, 5), LambdaScales(0, 0, 0, 0)):
            T = compose_global_transform(IDENTITY_PARAMS, lam, rng.uniform(-5, 5, 2))
            assert torch.equal(T, torch.eye(3, dtype=torch.float64))

    def test_pure_translation(self):
        T = compose_global_transform((1, 1, 0, 0, 0, 2, 3), LambdaScales(t=1.0), (7.0, -1.0))
        pts = np.random.default_rng(0).uniform(-10, 10, (6, 2))
        np.testing.assert_allclose(global_displacements(T, pts).numpy()[0], np.tile([2, 3], (6, 1)), atol=1e-12)

    def test_quarter_turn(self):
        T = compose_global_transform((1, 1, 0, 0, math.pi / 2, 0, 0), LambdaScales(r=1.0), (0.0, 0.0))
        np.testing.assert_allclose((T @ torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)).numpy(), [0, 1, 1],
                                   atol=1e-9)

    def test_center_is_fixed_without_translation(self):
        rng = np.random.default_rng(1)
        prm = random_params(rng)
        prm[5:] = 0
        c = torch.tensor([3.0, 4.0], dtype=torch.float64)
        T = compose_global_transform(prm, LambdaScales(), c)
        np.testing.assert_allclose((T[:2, :2] @ c + T[:2, 2]).numpy(), c.numpy(), atol=1e-12)

    def test_displacements_against_matrix_apply(self):
        rng = np.random.default_rng(2)
        T = compose_global_transform(random_params(rng, 5), LambdaScales(), (1.0, 2.0)).numpy()
        pts = rng.uniform(-3, 3, (9, 2))
        got = global_displacements(torch.tensor(T), pts).numpy()
        for j in range(5):
            for n in range(9):
                hom = T[j] @ np.array([pts[n, 0], pts[n, 1], 1.0])
                np.testing.assert_allclose(got[j, n], hom[:2] - pts[n], atol=1e-12)

    def test_zero_lambda_t_has_no_translation(self):
        rng = np.random.default_rng(3)
        c = torch.tensor([0.4, -0.2], dtype=torch.float64)
        T = compose_global_transform(random_params(rng, 6), LambdaScales(t=0.0), c)
        assert torch.equal(explicit_translation(T, c), torch.zeros(6, 2, dtype=torch.float64))

    def test_identity_global_gives_zero(self):
        T = torch.eye(3, dtype=torch.float64).expand(4, 3, 3)
        assert float(global_displacements(T, np.ones((5, 2))).abs().max()) == 0.0


class TestField:
    def setup_method(self):
        self.z = torch.tensor(np.random.default_rng(0).uniform(-0.8, 0.8, (12, 2)))

    def test_zero_init_is_static(self):
        _, _, dz = predict_displacements(make_motion_field(12, 5, 16, 0), self.z)
        assert dz.shape == (5, 12, 2) and float(dz.detach().abs().max()) == 0.0

    def test_sum_law(self):
        loc, glob, dz = predict_displacements(perturbed_field(12, 5), self.z)
        assert torch.equal(dz, loc + glob)

    def test_zero_lambdas_leave_local_only(self):
        loc, glob, dz = predict_displacements(perturbed_field(12, 5), self.z, LambdaScales(0, 0, 0, 0))
        assert torch.equal(dz, loc) and float(glob.detach().abs().max()) == 0.0

    def test_zero_translation_scale(self):
        fld = perturbed_field(12, 5)
        c = bbox_center(self.z)
        _, params = fld(self.z)
        T = compose_global_transform(params, LambdaScales(t=0.0), c)
        assert float(explicit_translation(T.detach(), c).abs().max()) == 0.0

    def test_seeded_construction(self):
        a, b = make_motion_field(12, 3, 16, 9), make_motion_field(12, 3, 16, 9)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


class TestVideo:
    def test_static_frames(self):
        sk = random_sketch(np.random.default_rng(0), 32)
        vid = render_video(FrameSet.static(sk.control_points(), 4), sk)
        assert vid.shape == (32, 32, 4)
        for j in range(4):
            assert np.array_equal(vid[..., j], render(sk)[..., 0])

    def test_frames_against_single_renders(self):
        rng = np.random.default_rng(1)
        sk = random_sketch(rng, 32)
        fs = FrameSet(sk.control_points(), rng.normal(0, 1.5, (3,) + sk.control_points().shape))
        vid = render_video(fs, sk)
        for j in range(3):
            np.testing.assert_allclose(vid[..., j], render(sk.with_control_points(fs.frame_points(j)))[..., 0],
                                       atol=1e-12)

    def test_point_count_mismatch(self):
        sk = random_sketch(np.random.default_rng(2), 32)
        with pytest.raises(DomainError):
            render_video(FrameSet.static(np.zeros((5, 2)), 2), sk)

    def test_center_of_mass(self):
        v = np.ones((10, 10, 2))
        v[2, 3, 0] = 0.0
        v[7, 1, 1] = 0.5
        np.testing.assert_allclose(center_of_mass_path(v), [[3, 2], [1, 7]])
        with pytest.raises(DomainError):
            center_of_mass_path(np.ones((4, 4, 1)))

    def test_pearson(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
        with pytest.raises(DomainError):
            pearson([1, 1], [1, 2])


class TestOptimize:
    def setup_method(self):
        self.sk = random_sketch(np.random.default_rng(3), 32, 3)
        self.sched = NoiseSchedule.cosine(1000)
        vid = render_video(FrameSet.static(self.sk.control_points(), 4), self.sk)
        self.backend = VideoBackends(TargetPullingVideoPredictor(torch.as_tensor(vid).permute(2, 0, 1), self.sched),
                                     self.sched)

    def test_zero_steps_is_static(self):
        fs, tr = optimize_animation(self.sk, "x", AnimateConfig(frames=4, steps=0, hidden=16), self.backend,
                                    np.random.default_rng(0))
        assert np.all(fs.displacements == 0) and tr.path == []

    def test_alternation_and_determinism(self):
        cfg = AnimateConfig(frames=4, steps=5, hidden=16)
        a, ta = optimize_animation(self.sk, "x", cfg, self.backend, np.random.default_rng(1))
        b, tb = optimize_animation(self.sk, "x", cfg, self.backend, np.random.default_rng(1))
        assert ta.path == ["local", "global", "local", "global", "local"]
        assert np.array_equal(a.displacements, b.displacements) and ta.timesteps == tb.timesteps

    def test_empty_sketch(self):
        from vectorsketch.geometry import VectorSketch
        with pytest.raises(DomainError):
            optimize_animation(VectorSketch([], (8, 8)), "x", AnimateConfig(steps=1), self.backend,
                               np.random.default_rng(0))

    def test_defaults(self):
        cfg = AnimateConfig()
        assert (cfg.steps, cfg.local_lr, cfg.global_lr) == (1000, 5e-3, 1e-4)
        assert (cfg.local_guidance, cfg.global_guidance) == (30.0, 40.0)
        lam = cfg.lambdas
        assert (lam.t, lam.r, lam.s, lam.sh) == (1.0, 1e-2, 5e-2, 1e-1)


def test_displacement_file_round_trip(tmp_path):
    d = np.random.default_rng(0).normal(0, 3, (3, 5, 2))
    fs = FrameSet(np.zeros((5, 2)), d)
    write_displacements(fs, tmp_path / "dz.bin")
    raw = (tmp_path / "dz.bin").read_bytes()
    assert raw[:4] == b"VSDZ" and len(raw) == 12 + 3 * 5 * 2 * 4
    np.testing.assert_allclose(read_displacements(tmp_path / "dz.bin"), d.astype(np.float32), atol=0)
    (tmp_path / "bad.bin").write_bytes(b"nope" + raw[4:])
    with pytest.raises(DomainError):
        read_displacements(tmp_path / "bad.bin")
