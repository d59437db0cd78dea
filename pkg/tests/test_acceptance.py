"""Acceptance suite. Each test carries a ``criterion`` marker; the terminal
summary prints one PASS/FAIL/SKIP line per criterion (see conftest.py).

Golden runs use the deterministic mock backends with fixed seeds. The
settings below were chosen once and frozen; they are not tuned per run.
"""
import importlib
import json
import math
import os
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest
import torch

from vectorsketch import cli
from vectorsketch.animate import (
    IDENTITY_PARAMS,
    AnimateConfig,
    FrameSet,
    LambdaScales,
    VideoBackends,
    center_of_mass_path,
    compose_global_transform,
    explicit_translation,
    make_motion_field,
    optimize_animation,
    pearson,
    predict_displacements,
    render_video,
)
from vectorsketch.concept_tree import (
    PairState,
    SeedCandidate,
    TreeGrowConfig,
    consistency,
    consistency_matrix,
    grow_tree,
    moving_average,
    select_seed,
    train_pair,
)
from vectorsketch.config import MANIFEST_NAME, config_from_dict
from vectorsketch.eval_metrics import diversity
from vectorsketch.geometry import (
    Box2,
    Stroke,
    VectorSketch,
    evaluate_cubic,
    fit_into_box,
    read_glyph,
    split_cubic,
    subdivide_outline,
    triangulate_constrained,
)
from vectorsketch.guidance import NoiseSchedule, TextCondition, layer_l2_loss, semantic_loss, skewed_timestep_probs
from vectorsketch.mocks import (
    MockEmbeddingGenerator,
    MockImageEncoder,
    MockLatentCodec,
    TargetPullingPredictor,
    TargetPullingVideoPredictor,
)
from vectorsketch.object_sketch import ObjectSketchConfig, run_seeds, select_lowest
from vectorsketch.raster import render, render_filled_loops, render_with_gradients, save_png
from vectorsketch.scene_sketch import (
    SceneSketchConfig,
    apply_keep_probs,
    build_ratio_schedule,
    fidelity_row,
    ratio_loss,
    simplify_iteratively,
    sparsity_loss,
)
from vectorsketch.svg import write_svg
from vectorsketch.typo import (
    ToneScheduleParams,
    WordAsImageConfig,
    WordBackends,
    acap_loss,
    optimize_letter,
    prepare_letter,
    render_glyph,
    tone_loss,
    tone_weight,
)

from conftest import GLYPHS, L_POLY, polygon_glyph, random_sketch

criterion = pytest.mark.criterion


# ----------------------------------------------------------------------------
# 1


@criterion(1, "rasterizer gradients vs central differences")
def test_rasterizer_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    h = 1e-4
    worst, checked = 0.0, 0
    for _ in range(20):
        sk = random_sketch(rng, 48, 8)
        # keep opacity away from 1 so the central difference stays in range
        sk = VectorSketch([replace(s, opacity=min(s.opacity, 0.95)) for s in sk.strokes], sk.canvas)
        up = rng.uniform(-1, 1, (48, 48, 1))
        grads = render_with_gradients(sk, None, up)

        def f(i, **change):
            strokes = [replace(s, **change) if k == i else s for k, s in enumerate(sk.strokes)]
            return float((render(VectorSketch(strokes, sk.canvas)) * up).sum())

        def check(analytic, plus, minus):
            nonlocal worst, checked
            fd = (plus - minus) / (2 * h)
            worst = max(worst, abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6))
            checked += 1

        for i, s in enumerate(sk.strokes):
            for j in range(s.points.shape[0]):
                for d in range(2):
                    hi, lo = s.points.copy(), s.points.copy()
                    hi[j, d] += h
                    lo[j, d] -= h
                    check(grads["points"][i][j, d], f(i, points=hi), f(i, points=lo))
            check(grads["widths"][i], f(i, width=s.width + h), f(i, width=s.width - h))
            check(grads["opacities"][i], f(i, opacity=s.opacity + h), f(i, opacity=s.opacity - h))
    elapsed = time.perf_counter() - start
    print(f"\n  {checked} parameters, worst relative error {worst:.2e}, {elapsed:.1f} s")
    assert worst < 1e-3
    assert elapsed < 60


# ----------------------------------------------------------------------------
# 2


@criterion(2, "Bezier and trace suite")
def test_bezier_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    for _ in range(100):
        c = rng.uniform(-50, 50, (4, 2))
        assert np.array_equal(evaluate_cubic(c, 0.0), c[0])
        assert np.array_equal(evaluate_cubic(c, 1.0), c[3])
        s = float(rng.uniform(0.05, 0.95))
        left, right = split_cubic(c, s)
        assert np.array_equal(left[3], right[0])
        for t in np.linspace(0, 1, 101):
            expect = evaluate_cubic(c, t)
            got = evaluate_cubic(left, t / s) if t <= s else evaluate_cubic(right, (t - s) / (1 - s))
            assert np.max(np.abs(got - expect)) < 1e-9 * max(1.0, np.abs(c).max())

    box = Box2((10, 10), (118, 118))
    for name in ("0053.glyph", "0061.glyph"):
        g = read_glyph(GLYPHS / name)
        a = fit_into_box(g, box)
        b = fit_into_box(subdivide_outline(g, 3 * g.num_segments + 60), box)
        ra = render_filled_loops([torch.tensor(c[:, :3].reshape(-1, 2)) for c in a.contours], (128, 128))
        rb = render_filled_loops([torch.tensor(c[:, :3].reshape(-1, 2)) for c in b.contours], (128, 128))
        assert float((ra - rb).abs().mean()) < 1e-3
    elapsed = time.perf_counter() - start
    print(f"\n  {elapsed:.1f} s")
    assert elapsed < 10


# ----------------------------------------------------------------------------
# 3


@criterion(3, "loss identities")
def test_loss_identities():
    enc = MockImageEncoder()
    img = render(random_sketch(np.random.default_rng(0), 48))
    assert float(semantic_loss(enc, img, img)) == 0.0
    assert float(layer_l2_loss(enc, img, img, [2, 3, 4, 7, 11])) == 0.0

    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 10, (20, 2))
    tri = triangulate_constrained(pts)
    assert float(acap_loss(pts, pts, tri)) == 0.0
    th = 1.1
    rot = (pts - 5) @ np.array([[math.cos(th), math.sin(th)], [-math.sin(th), math.cos(th)]]) + [8.0, -3.0]
    assert float(acap_loss(pts, rot, tri)) < 1e-9

    lp = render_glyph(torch.tensor(polygon_glyph(L_POLY).control_points() * 30 + 5), polygon_glyph(L_POLY), 40)
    assert float(tone_loss(lp, lp, 3.0)) == 0.0

    assert sparsity_loss([1, 0, 0, 0]) == 0.25
    assert ratio_loss(0.5, 1.0, 0.5) == 0.0
    assert ratio_loss(0.3, 0.6, 0.5) == 0.0
    assert ratio_loss(0.5, 1.0, 1.0) == 0.25


# ----------------------------------------------------------------------------
# 4


@criterion(4, "anchored constants")
def test_constants():
    assert ObjectSketchConfig().w_s == 0.1
    assert tone_weight(300, ToneScheduleParams(a=100, b=300, c=30)) == 100.0
    lam = LambdaScales()
    assert (lam.t, lam.r, lam.s, lam.sh) == (1.0, 1e-2, 5e-2, 1e-1)
    acfg = AnimateConfig()
    assert (acfg.local_guidance, acfg.global_guidance, acfg.steps) == (30.0, 40.0, 1000)
    assert build_ratio_schedule(1.0, 4) == [1.0, 0.5, 0.25, 0.125]
    for T in (10, 1000):
        assert abs(skewed_timestep_probs(T, 0.5).sum() - 1.0) < 1e-12


# ----------------------------------------------------------------------------
# 5


class _TableEncoder(MockImageEncoder):
    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)

    def embed(self, img):
        return torch.as_tensor(self.table[int(np.asarray(img)[0, 0, 0])])


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


@criterion(5, "oracle equivalence of consistency and seed selection")
def test_oracles():
    rng = np.random.default_rng(0)
    table = rng.normal(size=(10, 6))
    enc = _TableEncoder(table)
    ids = [[0, 1, 2], [3, 4, 5, 6], [7, 8, 9]]
    sets = [[np.full((2, 2, 1), float(i)) for i in g] for g in ids]

    def brute(a, b, same):
        vals = [_cos(table[i], table[j]) for x, i in enumerate(a) for y, j in enumerate(b) if not (same and x == y)]
        return sum(vals) / len(vals)

    m = consistency_matrix(sets, enc)
    for i in range(3):
        for j in range(3):
            assert abs(m[i, j] - brute(ids[i], ids[j], i == j)) < 1e-12
            assert abs(consistency(sets[i], sets[j], enc) - brute(ids[i], ids[j], i == j)) < 1e-12

    for _ in range(100):
        vals = rng.uniform(-1, 1, (int(rng.integers(1, 8)), 3))
        cands = [SeedCandidate(i, np.zeros(2), np.zeros(2), *v) for i, v in enumerate(vals)]
        scores = [v[0] + v[1] + min(v[0], v[1]) - v[2] for v in vals]
        assert select_seed(cands).seed == int(np.argmax(scores))
    a = SeedCandidate(0, np.zeros(2), np.zeros(2), 0.9, 0.8, 0.5)
    b = SeedCandidate(1, np.zeros(2), np.zeros(2), 0.95, 0.9, 0.85)
    assert a.score == pytest.approx(2.0, abs=1e-12) and b.score == pytest.approx(1.9, abs=1e-12)
    assert select_seed([b, a]) is a


# ----------------------------------------------------------------------------
# 6


@criterion(6, "diversity formula")
def test_diversity():
    img = np.random.default_rng(0).random((16, 16))
    assert diversity([img, img.copy(), img.copy()]) == pytest.approx(0.0, abs=1e-15)
    assert abs(diversity([np.ones((16, 16)), np.zeros((16, 16))]) - 0.5) < 1e-9


# ----------------------------------------------------------------------------
# 7: seeded mock golden runs, each under two minutes


@pytest.fixture
def timed():
    start = time.perf_counter()
    yield
    assert time.perf_counter() - start < 120


@criterion(7, "mock end-to-end convergence")
def test_golden_object(two_stroke_sketch, timed):
    cfg = ObjectSketchConfig(num_strokes=2, num_seeds=3, iterations=300, canvas=(64, 64), stroke_width=2.5)
    runs = run_seeds(render(two_stroke_sketch), cfg, MockImageEncoder(), seed=0)
    tr = runs[select_lowest([t.best_eval for _, t in runs])][1]
    print(f"\n  object eval loss {tr.initial_eval:.4g} -> {tr.best_eval:.4g}")
    assert tr.best_eval <= 0.5 * tr.initial_eval


@criterion(7, "mock end-to-end convergence")
def test_golden_scene(toy_scene, timed):
    img = render(toy_scene)
    cfg = SceneSketchConfig(num_strokes=8, canvas=(40, 40), iterations=100, steps_per_level=100, stroke_width=1.5,
                            offset_lr=3e-3, keep_lr=2e-3)
    enc = MockImageEncoder()
    fid = fidelity_row(img, 11, cfg, enc, np.random.default_rng(0))
    levels = simplify_iteratively(fid, img, build_ratio_schedule(fid.l_clip, 3), cfg, enc)
    kept = [lv.kept() for lv in levels]
    print(f"\n  kept strokes per level {kept}")
    assert len(kept) == 3
    assert all(a >= b for a, b in zip(kept, kept[1:]))


@criterion(7, "mock end-to-end convergence")
def test_golden_word(timed):
    glyph = polygon_glyph(L_POLY, "L", 0.9)
    cfg = WordAsImageConfig(render_size=64, crop=None, perspective_prob=0.0, lpf_sigma=3.2, iterations=80,
                            control_points=48)
    task = prepare_letter("lamp", 0, glyph, cfg)
    p0 = torch.tensor(task.glyph.control_points())
    sheared = p0.clone()
    sheared[:, 0] += (sheared[:, 1] - 32) * 0.35
    target = render_glyph(sheared, task.glyph, 64).detach()
    sched = NoiseSchedule.cosine()
    codec = MockLatentCodec()
    be = WordBackends(codec, TargetPullingPredictor(codec.encode(target), sched), sched)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out, _ = optimize_letter(task, cfg, be, np.random.default_rng(0), augment=False)
    before = float(tone_loss(target, render_glyph(p0, task.glyph, 64), 3.2))
    after = float(tone_loss(target, render_glyph(torch.tensor(out.control_points()), task.glyph, 64), 3.2))
    print(f"\n  tone distance to the mock target {before:.4g} -> {after:.4g}")
    assert after <= 0.5 * before


@criterion(7, "mock end-to-end convergence")
def test_golden_animation(timed):
    sk = VectorSketch([Stroke([[12, 14], [18, 8], [26, 20], [30, 14]], 2.0),
                       Stroke([[14, 28], [20, 22], [24, 32], [30, 26]], 2.0)], canvas=(48, 48))
    k = 8
    drift = np.linspace(-4, 4, k)
    base = sk.control_points()
    target = FrameSet(base, np.stack([np.tile([d, 0.0], (len(base), 1)) for d in drift]))
    sched = NoiseSchedule.cosine(1000)
    pred = TargetPullingVideoPredictor(torch.as_tensor(render_video(target, sk)).permute(2, 0, 1), sched)
    cfg = AnimateConfig(frames=k, steps=100, hidden=64, augment=False)
    fs, _ = optimize_animation(sk, "a sketch moving", cfg, VideoBackends(pred, sched), np.random.default_rng(0))
    com = center_of_mass_path(render_video(fs, sk))
    r = pearson(com[:, 0], drift)
    print(f"\n  centre-of-mass Pearson r {r:.4f}")
    assert r > 0.9


@criterion(7, "mock end-to-end convergence")
def test_golden_concept(timed):
    gen = MockEmbeddingGenerator()
    e = np.zeros(8)
    e[[1, 5]] = 0.7
    cond = TextCondition("a <x>", token_slots={"<x>": torch.tensor(e)})
    rng = np.random.default_rng(0)
    images = [gen.generate(cond, rng) for _ in range(10)]
    init = gen.word_embedding("object").numpy()
    _, trace = train_pair(images, PairState(init, init), 200, gen, np.random.default_rng(1))
    ma = moving_average(trace, 100)
    print(f"\n  probe loss moving average {ma[0]:.4g} -> {ma[-1]:.4g}")
    assert ma.size == 101
    assert np.all(np.diff(ma) <= 0)


# ----------------------------------------------------------------------------
# 8


@criterion(8, "structural invariants")
def test_invariants():
    rng = np.random.default_rng(0)
    z = torch.tensor(rng.uniform(-0.8, 0.8, (16, 2)))
    fld = make_motion_field(16, 6, 16, 0)
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in fld.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    loc, glob, dz = predict_displacements(fld, z)
    assert torch.equal(dz, loc + glob)

    c = torch.tensor([0.1, -0.3], dtype=torch.float64)
    params = torch.tensor(np.asarray(IDENTITY_PARAMS) + rng.normal(0, 0.5, (6, 7)))
    T = compose_global_transform(params, LambdaScales(t=0.0), c)
    assert torch.equal(explicit_translation(T, c), torch.zeros(6, 2, dtype=torch.float64))
    for lam in (LambdaScales(), LambdaScales(2, 3, 4, 5)):
        assert torch.equal(compose_global_transform(IDENTITY_PARAMS, lam, (3.0, 1.0)), torch.eye(3, dtype=torch.float64))

    for _ in range(5):
        sk = random_sketch(rng, 40)
        i = int(rng.integers(len(sk)))
        p = np.ones(len(sk))
        p[i] = 0.0
        gone = VectorSketch([s for k, s in enumerate(sk.strokes) if k != i], sk.canvas)
        assert np.array_equal(render(apply_keep_probs(sk, p)), render(gone))

    def sq(r):
        img = np.ones((32, 32, 1))
        img[r:r + 8, 10:18] = 0.0
        return img

    for depth in (1, 2):
        cfg = TreeGrowConfig(k_seeds=2, probe_steps=2, final_steps=2, parent_set_size=4, node_sample_size=4,
                             max_depth=depth, stop_threshold=-1.0)
        tree = grow_tree([sq(8), sq(10), sq(12)], cfg, MockEmbeddingGenerator(), MockImageEncoder(),
                         np.random.default_rng(0))
        assert tree.splits > 0 and len(tree.nodes) == 2 * tree.splits + 1


# ----------------------------------------------------------------------------
# 9


@pytest.fixture
def run_inputs(tmp_path, two_stroke_sketch, toy_scene):
    d = tmp_path / "inputs"
    (d / "imgs").mkdir(parents=True)
    save_png(render(two_stroke_sketch), d / "object.png")
    save_png(render(toy_scene), d / "scene.png")
    write_svg(two_stroke_sketch, d / "sketch.svg")
    for i in range(3):
        img = np.ones((32, 32, 3))
        img[6 + 2 * i:14 + 2 * i, 10:18] = 0.0
        save_png(img, d / "imgs" / f"im{i}.png")
    return d


def _configs(d):
    return {
        "object": {"object": {"image": str(d / "object.png"), "num_strokes": 2, "num_seeds": 2, "iterations": 4,
                              "canvas": 32}},
        "scene": {"scene": {"image": str(d / "scene.png"), "num_strokes": 4, "levels": 2, "iterations": 3,
                            "steps_per_level": 3, "fidelity_layers": [2, 11], "canvas": 32}},
        "word": {"word": {"word": "to", "letters": [1], "glyph_dir": str(GLYPHS), "iterations": 3,
                          "render_size": 32, "control_points": 24, "height": 48}},
        "animate": {"animate": {"svg": str(d / "sketch.svg"), "prompt": "a wave", "frames": 3, "steps": 3,
                                "render_size": 24}},
        "concept": {"concept": {"images": str(d / "imgs"), "depth": 1, "k_seeds": 2, "probe_steps": 2,
                                "final_steps": 2, "parent_set_size": 2, "node_sample_size": 2}},
    }


@criterion(9, "reproducible artifact checksums")
@pytest.mark.parametrize("pipeline", ["object", "scene", "word", "animate", "concept"])
def test_reproducibility(pipeline, run_inputs, tmp_path):
    sums = []
    for run in ("first", "second"):
        raw = {"pipeline": pipeline, "seed": 11, "output_dir": str(tmp_path / run), **_configs(run_inputs)[pipeline]}
        out = cli.execute(config_from_dict(raw, environ={}))
        manifest = json.loads((out / MANIFEST_NAME).read_text())
        sums.append([(a["path"], a["sha256"]) for a in manifest["artifacts"]])
    assert len(sums[0]) > 2
    assert sums[0] == sums[1]


# ----------------------------------------------------------------------------
# 10: optional, needs real model adapters and weights


@criterion(10, "real-backend horse recognition (optional, non-gating)")
@pytest.mark.xfail(strict=False, reason="optional integration; failures do not fail the build")
def test_real_backend_horse():
    """Opt in with three variables:
    VECTORSKETCH_ACCEPT_ADAPTER=module:adapter_name   (importing the module registers the adapter)
    VECTORSKETCH_ACCEPT_HORSE=/path/to/horse.png
    VECTORSKETCH_ACCEPT_CLASSIFIER=module:function    (image array -> five labels)
    """
    need = ("VECTORSKETCH_ACCEPT_ADAPTER", "VECTORSKETCH_ACCEPT_HORSE", "VECTORSKETCH_ACCEPT_CLASSIFIER")
    if not all(os.environ.get(k) for k in need):
        pytest.skip("real backend adapter, weights and classifier not configured")
    from vectorsketch.backends import load_backends
    from vectorsketch.config import BackendSpec
    from vectorsketch.object_sketch import multi_seed_select
    from vectorsketch.raster import load_image

    mod, name = os.environ[need[0]].split(":")
    importlib.import_module(mod)
    be = load_backends(BackendSpec(kind="adapter", adapter=name))
    cmod, cfn = os.environ[need[2]].split(":")
    classify = getattr(importlib.import_module(cmod), cfn)
    img = load_image(os.environ[need[1]], 3, (224, 224))
    sketch = multi_seed_select(img, ObjectSketchConfig(num_strokes=16), be.encoder, seed=0)
    assert "horse" in list(classify(render(sketch)))[:5]
