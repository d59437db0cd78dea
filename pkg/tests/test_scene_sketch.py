from dataclasses import replace

import numpy as np
import pytest
import torch

from vectorsketch.errors import DomainError, NumericError
from vectorsketch.geometry import VectorSketch
from vectorsketch.mocks import MockImageEncoder
from vectorsketch.raster import render
from vectorsketch.scene_sketch import (
    MatrixCell,
    SceneSketchConfig,
    SimplifiedSketch,
    apply_keep_probs,
    assemble_matrix,
    build_ratio_schedule,
    combine_matrices,
    decompose_scene,
    fidelity_row,
    make_keep_network,
    make_offset_network,
    ratio_loss,
    scene_init,
    scene_layers,
    simplify_iteratively,
    sparsity_loss,
)

from conftest import random_sketch


def scene_cfg(**kw):
    base = dict(num_strokes=8, canvas=(40, 40), iterations=10, steps_per_level=10, stroke_width=1.5,
                offset_lr=3e-3, keep_lr=3e-3, hidden=32)
    base.update(kw)
    return SceneSketchConfig(**base)


class TestLosses:
    def test_sparsity(self):
        assert sparsity_loss(np.ones(6)) == 1.0
        assert sparsity_loss([1, 0, 0, 0]) == 0.25
        assert float(sparsity_loss(torch.tensor([0.2, 0.4], dtype=torch.float64))) == pytest.approx(0.3, abs=1e-15)
        with pytest.raises(DomainError):
            sparsity_loss([])

    def test_ratio(self):
        assert ratio_loss(0.5, 1.0, 0.5) == 0.0
        assert ratio_loss(0.5, 1.0, 1.0) == 0.25
        with pytest.raises(NumericError):
            ratio_loss(0.5, 0.0, 1.0)

    def test_halving_schedule(self):
        assert build_ratio_schedule(1.0, 4) == [1.0, 0.5, 0.25, 0.125]

    def test_schedule_starts_at_inverse_loss(self):
        s = build_ratio_schedule(0.5, 3)
        assert s[0] == 2.0 and s == [2.0, 1.0, 0.5]

    def test_schedule_step_grows_with_loss(self):
        s = build_ratio_schedule(3.0, 4)
        assert all(b == a / 8 for a, b in zip(s, s[1:]))

    def test_schedule_domain(self):
        with pytest.raises(DomainError):
            build_ratio_schedule(0.0, 3)
        with pytest.raises(DomainError):
            build_ratio_schedule(1.0, 0)


class TestKeepProbs:
    def test_ones_unchanged(self, toy_scene):
        assert np.array_equal(render(apply_keep_probs(toy_scene, np.ones(5))), render(toy_scene))

    def test_zero_equals_deletion(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            sk = random_sketch(rng, 40)
            i = int(rng.integers(len(sk.strokes)))
            p = np.ones(len(sk.strokes))
            p[i] = 0.0
            gone = VectorSketch([s for k, s in enumerate(sk.strokes) if k != i], sk.canvas)
            assert np.array_equal(render(apply_keep_probs(sk, p)), render(gone))

    def test_half_halves_width(self, toy_scene):
        out = apply_keep_probs(toy_scene, np.full(5, 0.5))
        assert [s.width for s in out.strokes] == [1.0] * 5
        assert np.array_equal(out.control_points(), toy_scene.control_points())

    def test_length_and_range(self, toy_scene):
        with pytest.raises(DomainError):
            apply_keep_probs(toy_scene, np.ones(4))
        with pytest.raises(DomainError):
            apply_keep_probs(toy_scene, np.full(5, 1.2))


class TestNetworks:
    def test_keep_outputs_inside_open_interval(self):
        for bias in (-50.0, 0.0, 50.0):
            p = make_keep_network(7, 16, 0, bias)()
            assert p.shape == (7,) and bool(((p > 0) & (p < 1)).all())

    def test_offset_starts_at_zero(self):
        net = make_offset_network(16, 3)
        z = torch.rand(10, 2, dtype=torch.float64)
        assert float(net(z).detach().abs().max()) == 0.0

    def test_seeded_construction(self):
        a, b = make_keep_network(4, 16, 5), make_keep_network(4, 16, 5)
        assert torch.equal(a(), b())

    def test_probability_can_recover(self):
        """A stroke pushed below 0.01 comes back above 0.5 when the pressure
        is reversed, since the output never saturates to exactly zero."""
        net = make_keep_network(4, 16, 1)
        opt = torch.optim.Adam(net.parameters(), lr=SceneSketchConfig().keep_lr)
        while float(net()[2].detach()) >= 0.01:
            opt.zero_grad()
            net()[2].backward()
            opt.step()
        for _ in range(400):
            opt.zero_grad()
            (-net()[2]).backward()
            opt.step()
        assert float(net()[2].detach()) > 0.5


class TestRows:
    def test_zero_iterations_returns_init(self, toy_scene):
        img = render(toy_scene)
        fid = fidelity_row(img, 11, scene_cfg(iterations=0), MockImageEncoder(), np.random.default_rng(0))
        assert np.array_equal(fid.sketch.control_points(), fid.init.control_points())
        assert fid.trace.eval == [fid.l_clip]

    def test_init_is_seeded(self, toy_scene):
        img = render(toy_scene)
        a = scene_init(img, scene_cfg(), np.random.default_rng(4))
        b = scene_init(img, scene_cfg(), np.random.default_rng(4))
        assert np.array_equal(a.control_points(), b.control_points())

    def test_foreground_layers(self):
        assert scene_layers(11, True) == (11, 4)
        assert scene_layers(4, True) == (4,)
        assert scene_layers(11, False) == (11,)

    def test_canvas_mismatch(self, toy_scene):
        with pytest.raises(DomainError):
            fidelity_row(render(toy_scene), 2, scene_cfg(canvas=(32, 32)), MockImageEncoder(),
                         np.random.default_rng(0))

    def test_simplification_deterministic(self, toy_scene):
        img = render(toy_scene)
        cfg = scene_cfg()
        fid = fidelity_row(img, 11, cfg, MockImageEncoder(), np.random.default_rng(0))
        sched = build_ratio_schedule(fid.l_clip, 2)
        a = simplify_iteratively(fid, img, sched, cfg, MockImageEncoder())
        b = simplify_iteratively(fid, img, sched, cfg, MockImageEncoder())
        assert all(np.array_equal(x.probs, y.probs) for x, y in zip(a, b))
        # the fidelity result is not mutated by fine-tuning
        again = fidelity_row(img, 11, cfg, MockImageEncoder(), np.random.default_rng(0))
        assert np.array_equal(fid.sketch.control_points(), again.sketch.control_points())

    def test_first_level_keeps_nearly_everything(self, toy_scene):
        img = render(toy_scene)
        cfg = scene_cfg(iterations=30, steps_per_level=30)
        fid = fidelity_row(img, 11, cfg, MockImageEncoder(), np.random.default_rng(0))
        out = simplify_iteratively(fid, img, build_ratio_schedule(fid.l_clip, 1), cfg, MockImageEncoder())
        assert out[0].probs.mean() > 0.8


class TestDecompose:
    def test_full_mask(self):
        img = np.random.default_rng(0).random((6, 6, 3))
        fg, bg = decompose_scene(img, np.ones((6, 6)), np.zeros((6, 6, 3)))
        assert np.array_equal(fg, img) and np.array_equal(bg, np.zeros((6, 6, 3)))

    def test_empty_mask_is_white(self):
        img = np.random.default_rng(0).random((6, 6, 3))
        fg, _ = decompose_scene(img, np.zeros((6, 6)), img)
        assert np.all(fg == 1.0)

    def test_checker(self):
        img = np.full((4, 4, 1), 0.2)
        mask = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
        fg, _ = decompose_scene(img, mask, img)
        np.testing.assert_allclose(fg[..., 0], np.where(mask == 1, 0.2, 1.0))

    def test_shape_checks(self):
        with pytest.raises(DomainError):
            decompose_scene(np.ones((4, 4, 1)), np.ones((4, 5)), np.ones((4, 4, 1)))
        with pytest.raises(DomainError):
            decompose_scene(np.ones((4, 4, 1)), np.full((4, 4), 2.0), np.ones((4, 4, 1)))


class TestMatrix:
    def test_single_cell(self, toy_scene):
        m = assemble_matrix([(toy_scene, [])])
        assert m.shape == (1, 1) and m.cell(0, 0).sketch is toy_scene

    def test_four_by_four_layout(self):
        rng = np.random.default_rng(0)
        rows = []
        for k in range(4):
            simp = [SimplifiedSketch(random_sketch(rng), np.ones(2), 1.0, float(10 * k + j), 0.5) for j in range(3)]
            rows.append((random_sketch(rng), simp))
        m = assemble_matrix(rows)
        assert m.shape == (4, 4)
        for k in range(4):
            assert m.cell(0, k).sketch is rows[k][0]
            for j in range(1, 4):
                assert m.cell(j, k).loss == 10 * k + j - 1

    def test_ragged_rows(self, toy_scene):
        with pytest.raises(DomainError):
            assemble_matrix([(toy_scene, [toy_scene]), (toy_scene, [])])

    def test_combine(self, toy_scene, two_stroke_sketch):
        half = VectorSketch(toy_scene.strokes[:2], toy_scene.canvas)
        rest = VectorSketch(toy_scene.strokes[2:], toy_scene.canvas)
        fg = assemble_matrix([(MatrixCell(half, np.ones(2)), [])])
        bg = assemble_matrix([(MatrixCell(rest, np.zeros(3)), [])])
        both = combine_matrices(fg, bg).cell(0, 0)
        assert len(both.sketch) == 5
        # the background goes first, the foreground is drawn on top
        assert np.array_equal(both.sketch.strokes[3].points, toy_scene.strokes[0].points)
        assert np.array_equal(both.probs, [0, 0, 0, 1, 1])
        other = assemble_matrix([(replace(two_stroke_sketch), [])])
        with pytest.raises(DomainError):
            combine_matrices(fg, other)
