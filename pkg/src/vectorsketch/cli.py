"""Command-line entry point.

    vectorsketch sketch-object --image cat.png --out runs/cat
    vectorsketch sketch-scene --image street.png --out runs/street
    vectorsketch word-as-image --word cat --letters 1 --out runs/cat-word
    vectorsketch animate --svg horse.svg --prompt "a galloping horse" --out runs/horse
    vectorsketch concept-tree grow --images imgs/ --depth 2 --out runs/tree
    vectorsketch concept-tree sample --tree runs/tree/tree --prompt "A photo of <v1>" --out runs/s
    vectorsketch metrics diversity sketches/

Every pipeline run writes config.yaml (canonical form), its artifacts, an
index.html gallery and manifest.json with sha256 checksums. Exit codes: 0 ok,
2 configuration or input error, 3 backend error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import html
import io
import json
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import animate as anim
from . import concept_tree as ct
from . import eval_metrics as em
from . import object_sketch as obj
from . import scene_sketch as scn
from . import typo
from .backends import Backends, load_backends, prompt_rng
from .config import (
    RunConfig,
    build_manifest,
    canonical_yaml,
    config_from_dict,
    deep_merge,
    env_overrides,
    now_iso,
    rng_stream,
    write_manifest,
)
from .errors import BackendError, ConfigError, DomainError, NumericError, UnsupportedElementError, VectorSketchError
from .fonts import load_word_glyphs
from .geometry import Stroke, VectorSketch
from .guidance import TextCondition
from .mocks import TargetPullingPredictor, TargetPullingVideoPredictor
from .raster import load_image, render, save_png
from .svg import read_svg, write_animated_svg, write_svg

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# CLI flag -> (block field, type)
PIPELINE_FLAGS = {
    "object": {"image": str, "saliency": str, "strokes": ("num_strokes", int), "seeds": ("num_seeds", int),
               "iterations": int, "canvas": int, "w_s": float},
    "scene": {"image": str, "mask": str, "bg": str, "fidelity_layers": _int_list, "strokes": ("num_strokes", int),
              "levels": int, "iterations": int, "steps_per_level": int, "offset_lr": float, "keep_lr": float,
              "canvas": int},
    "word": {"word": str, "glyph_dir": str, "font": str, "iterations": int, "render_size": int,
             "control_points": int},
    "animate": {"svg": str, "prompt": str, "frames": int, "steps": int, "render_size": int},
    "concept": {"images": str, "depth": int, "k_seeds": int, "probe_steps": int, "final_steps": int},
}


# ----------------------------------------------------------------------------
# helpers


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return f"{x:.10g}" if isinstance(x, float) else str(x)


def _save_sketch(sketch: VectorSketch, stem: Path) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    write_svg(sketch, stem.with_suffix(".svg"))
    save_png(render(sketch), stem.with_suffix(".png"))


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"{d} is not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ConfigError(f"no images in {d}")
    return files


def write_gallery(out: Path, title: str) -> Path:
    """Static index.html showing every PNG under ``out`` grouped by folder."""
    groups: dict[str, list[str]] = {}
    for p in sorted(out.rglob("*.png")):
        rel = p.relative_to(out).as_posix()
        groups.setdefault(str(Path(rel).parent), []).append(rel)
    parts = ["<!DOCTYPE html>", "<html><head><meta charset=\"utf-8\">",
             f"<title>{html.escape(title)}</title>",
             "<style>body{font-family:sans-serif}figure{display:inline-block;margin:4px}"
             "img{max-width:200px;border:1px solid #ccc}</style></head><body>",
             f"<h1>{html.escape(title)}</h1>"]
    for group, files in groups.items():
        parts.append(f"<h2>{html.escape(group)}</h2>")
        for f in files:
            parts.append(f"<figure><img src=\"{html.escape(f)}\"><figcaption>{html.escape(Path(f).name)}"
                         "</figcaption></figure>")
    parts.append("</body></html>")
    p = out / "index.html"
    p.write_text("\n".join(parts) + "\n")
    return p


def _require(value, name: str):
    if value is None:
        raise ConfigError(f"{name} is required")
    return value


# ----------------------------------------------------------------------------
# pipelines; each returns a dict of summary numbers for the manifest


def run_object(cfg: RunConfig, be: Backends, out: Path) -> dict:
    b = cfg.object
    img = load_image(_require(b.image, "object.image"), 3, (b.canvas, b.canvas))
    ocfg = obj.ObjectSketchConfig(num_strokes=b.num_strokes, num_seeds=b.num_seeds, iterations=b.iterations,
                                  lr=b.lr, w_s=b.w_s, geometric_layers=tuple(b.geometric_layers),
                                  eval_every=b.eval_every, stroke_width=b.stroke_width,
                                  canvas=(b.canvas, b.canvas))
    base_seed = int(rng_stream(cfg.seed, "object/seeds").integers(2 ** 31))
    sal = None
    if b.saliency != "auto":
        sal = load_image(b.saliency, 1, (b.canvas, b.canvas))[..., 0]
    runs = obj.run_seeds(img, ocfg, be.encoder, seed=base_seed,
                         runner=lambda k: obj.optimize_object_sketch(img, ocfg, be.encoder,
                                                                     np.random.default_rng([base_seed, k]),
                                                                     saliency=sal))
    best = obj.select_lowest([tr.best_eval for _, tr in runs])
    save_png(img, out / "input.png")
    for k, (sk, tr) in enumerate(runs):
        _save_sketch(sk, out / "seeds" / f"seed_{k}")
        (out / "seeds" / f"seed_{k}_loss.csv").write_text(tr.to_csv())
    _save_sketch(runs[best][0], out / "sketch")
    tr = runs[best][1]
    return {"selected_seed": float(best), "initial_eval": tr.initial_eval, "best_eval": tr.best_eval}


def run_scene(cfg: RunConfig, be: Backends, out: Path) -> dict:
    b = cfg.scene
    img = load_image(_require(b.image, "scene.image"), 3, (b.canvas, b.canvas))
    scfg = scn.SceneSketchConfig(num_strokes=b.num_strokes, fidelity_layers=tuple(b.fidelity_layers),
                                 levels=b.levels, iterations=b.iterations, steps_per_level=b.steps_per_level,
                                 offset_lr=b.offset_lr, keep_lr=b.keep_lr, stroke_width=b.stroke_width,
                                 canvas=(b.canvas, b.canvas))
    rng = rng_stream(cfg.seed, "scene")
    if (b.mask is None) != (b.bg is None):
        raise ConfigError("scene.mask and scene.bg must be given together")
    if b.mask is None:
        matrix = scn.sketch_scene(img, scfg, be.encoder, rng)
    else:
        mask = load_image(b.mask, 1, (b.canvas, b.canvas))
        bg = load_image(b.bg, 3, (b.canvas, b.canvas))
        fg_img, bg_img = scn.decompose_scene(img, mask, bg)
        fg = scn.sketch_scene(fg_img, scfg, be.encoder, rng, foreground=True)
        bgm = scn.sketch_scene(bg_img, scfg, be.encoder, rng)
        matrix = scn.combine_matrices(fg, bgm)
    save_png(img, out / "input.png")
    rows, summary = [], {}
    rows_n, cols_n = matrix.shape
    for j in range(rows_n):
        for k in range(cols_n):
            cell = matrix.cell(j, k)
            _save_sketch(cell.sketch, out / "matrix" / f"cell_{j}_{k}")
            kept = len(cell.sketch) if cell.probs is None else int((np.asarray(cell.probs) > 0.5).sum())
            rows.append([j, k, scfg.fidelity_layers[k], kept, "" if cell.loss is None else _fmt(float(cell.loss))])
            summary[f"kept_{j}_{k}"] = float(kept)
            if cell.probs is not None:
                np.savetxt(out / "matrix" / f"cell_{j}_{k}_probs.txt", np.asarray(cell.probs), fmt="%.10g")
    (out / "matrix.csv").write_text(_csv(rows, ["simplicity", "fidelity", "layer", "kept_strokes", "loss"]))
    index = [{"simplicity": j, "fidelity": k, "layer": layer, "kept_strokes": kept,
              "loss": None if loss == "" else float(loss),
              "keep_probs": None if matrix.cell(j, k).probs is None
              else [float(x) for x in np.asarray(matrix.cell(j, k).probs)]}
             for j, k, layer, kept, loss in rows]
    (out / "matrix.json").write_text(json.dumps(index, indent=2) + "\n")
    save_png(contact_sheet(matrix), out / "matrix.png")
    return summary


def contact_sheet(matrix: scn.AbstractionMatrix, gap: int = 4) -> np.ndarray:
    """All cells rendered into one grid image, rows by simplicity level."""
    rows_n, cols_n = matrix.shape
    tiles = [[np.asarray(render(matrix.cell(j, k).sketch)) for k in range(cols_n)] for j in range(rows_n)]
    h, w = tiles[0][0].shape[:2]
    ch = tiles[0][0].shape[2] if tiles[0][0].ndim == 3 else 1
    sheet = np.ones((rows_n * h + (rows_n - 1) * gap, cols_n * w + (cols_n - 1) * gap, ch))
    for j in range(rows_n):
        for k in range(cols_n):
            y, x = j * (h + gap), k * (w + gap)
            sheet[y:y + h, x:x + w] = tiles[j][k].reshape(h, w, ch)
    return sheet if ch > 1 else sheet[..., 0]


def _mock_letter_target(task: typo.LetterTask, prompt: str, cfg: typo.WordAsImageConfig) -> np.ndarray:
    """Letter render sheared by a prompt-derived amount: a stand-in for what
    the denoiser would pull toward."""
    k = float(prompt_rng(prompt).uniform(-0.3, 0.3))
    pts = task.glyph.control_points().copy()
    cy = 0.5 * cfg.render_size
    pts[:, 0] += k * (pts[:, 1] - cy)
    with torch.no_grad():
        return typo.render_glyph(torch.as_tensor(pts), task.glyph, cfg.render_size, cfg.raster).numpy()


def run_word(cfg: RunConfig, be: Backends, out: Path) -> dict:
    b = cfg.word
    word = _require(b.word, "word.word")
    glyphs = load_word_glyphs(word, b.glyph_dir, b.font)
    layout = typo.layout_word(word, glyphs, b.height)
    letters = b.letters if b.letters is not None else [i for i, ch in enumerate(word) if not ch.isspace()]
    for i in letters:
        if not 0 <= i < len(word):
            raise ConfigError(f"word.letters: index {i} outside {word!r}")
    crop = None if be.is_mock else b.crop_size
    wcfg = typo.WordAsImageConfig(acap_weight=b.acap_weight, lpf_sigma=b.lpf_sigma, iterations=b.iterations,
                                  render_size=b.render_size, crop=crop, control_points=b.control_points)
    prompt = typo.build_prompt(word, wcfg.prompt_template)
    replacements, summary = {}, {}
    for i in letters:
        task = typo.prepare_letter(word, i, glyphs[i], wcfg)
        if be.is_mock:
            target = be.codec.encode(_mock_letter_target(task, prompt, wcfg))
            predictor = TargetPullingPredictor(target, be.schedule)
        else:
            predictor = _require(be.image_predictor, "adapter image_predictor")(prompt)
        wb = typo.WordBackends(be.codec, predictor, be.schedule, TextCondition(prompt))
        g, tr = typo.optimize_letter(task, wcfg, wb, rng_stream(cfg.seed, f"word/{i}"), augment=not be.is_mock)
        replacements[i] = g
        canvas = (wcfg.render_size, wcfg.render_size)
        _save_sketch(VectorSketch(typo.glyph_strokes(g), canvas), out / "letters" / f"letter_{i}")
        _save_sketch(VectorSketch(typo.glyph_strokes(task.glyph), canvas), out / "letters" / f"letter_{i}_input")
        rows = [[s, _fmt(tr.tone[s]), _fmt(tr.acap[s]), tr.timesteps[s]] for s in range(len(tr.tone))]
        (out / "letters" / f"letter_{i}_loss.csv").write_text(_csv(rows, ["step", "tone", "acap", "t"]))
        if tr.tone:
            summary[f"tone_final_{i}"] = tr.tone[-1]
    for subset, sk in typo.combinations(layout, replacements):
        name = "none" if not subset else "_".join(str(s) for s in subset)
        # SVG only: filled-glyph rasters at word size are slow on CPU
        (out / "combinations").mkdir(parents=True, exist_ok=True)
        write_svg(sk, out / "combinations" / f"word_{name}.svg")
    _save_sketch(typo.assemble_word(layout, replacements), out / "word")
    return summary


def _scaled_sketch(sketch: VectorSketch, size: int) -> VectorSketch:
    w, h = sketch.canvas
    s = size / max(w, h)
    strokes = [Stroke(st.points * s, st.width * s, st.opacity, st.color, st.filled) for st in sketch.strokes]
    return VectorSketch(strokes, (max(1, round(w * s)), max(1, round(h * s))), sketch.background)


def _mock_video_target(sketch: VectorSketch, prompt: str, frames: int) -> torch.Tensor:
    """Template translated along a prompt-derived direction over the clip."""
    ang = float(prompt_rng(prompt).uniform(0, 2 * np.pi))
    span = 0.15 * max(sketch.canvas)
    base = sketch.control_points()
    steps = np.linspace(-0.5, 0.5, frames) if frames > 1 else np.zeros(1)
    disp = np.stack([np.tile(span * t * np.array([np.cos(ang), np.sin(ang)]), (len(base), 1)) for t in steps])
    video = anim.render_video(anim.FrameSet(base, disp), sketch)
    return torch.as_tensor(video).permute(2, 0, 1)


def run_animate(cfg: RunConfig, be: Backends, out: Path) -> dict:
    b = cfg.animate
    prompt = _require(b.prompt, "animate.prompt")
    sketch = _scaled_sketch(read_svg(_require(b.svg, "animate.svg")), b.render_size)
    if be.is_mock:
        predictor = TargetPullingVideoPredictor(_mock_video_target(sketch, prompt, b.frames), be.schedule)
    else:
        predictor = _require(be.video_predictor, "adapter video_predictor")(prompt)
    acfg = anim.AnimateConfig(frames=b.frames, steps=b.steps, hidden=b.hidden, augment=b.augment and not be.is_mock)
    fs, tr = anim.optimize_animation(sketch, prompt, acfg, anim.VideoBackends(predictor, be.schedule),
                                     rng_stream(cfg.seed, "animate"))
    video = anim.render_video(fs, sketch, acfg.raster)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for j in range(video.shape[2]):
        save_png(video[..., j], out / "frames" / f"frame_{j:03d}.png")
    frames = [sketch.with_control_points(fs.frame_points(j)) for j in range(fs.k)]
    write_animated_svg(frames, out / "animation.svg", b.fps)
    write_svg(sketch, out / "input.svg")
    anim.write_displacements(fs, out / "displacements.bin")
    rows = [[s, tr.path[s], tr.timesteps[s], _fmt(tr.sds_norm[s])] for s in range(len(tr.path))]
    (out / "loss.csv").write_text(_csv(rows, ["step", "path", "t", "sds_grad_norm"]))
    return {"max_displacement": float(np.abs(fs.displacements).max()) if fs.displacements.size else 0.0}


def run_concept_grow(cfg: RunConfig, be: Backends, out: Path) -> dict:
    b = cfg.concept
    imgs = [load_image(p, 3) for p in list_images(_require(b.images, "concept.images"))]
    tcfg = ct.TreeGrowConfig(k_seeds=b.k_seeds, probe_steps=b.probe_steps, final_steps=b.final_steps,
                             parent_set_size=b.parent_set_size, node_sample_size=b.node_sample_size,
                             max_depth=b.depth, stop_threshold=b.stop_threshold, lr=b.lr)
    tree = ct.grow_tree(imgs, tcfg, be.generator, be.encoder, rng_stream(cfg.seed, "concept"))
    ct.write_tree(tree, out / "tree")
    return {"nodes": float(len(tree.nodes)), "splits": float(tree.splits)}


RUNNERS = {"object": run_object, "scene": run_scene, "word": run_word, "animate": run_animate,
           "concept": run_concept_grow}


def execute(cfg: RunConfig, backends: Backends | None = None) -> Path:
    """Run a configured pipeline end to end and write its manifest."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = now_iso()
    be = backends or load_backends(cfg.backend)
    (out / "config.yaml").write_text(canonical_yaml(cfg))
    torch.manual_seed(cfg.seed)
    summary = RUNNERS[cfg.pipeline](cfg, be, out)
    write_gallery(out, f"{cfg.pipeline} run (seed {cfg.seed})")
    write_manifest(build_manifest(cfg, out, started, summary), out)
    return out


# ----------------------------------------------------------------------------
# argument handling


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--backend", help="'mock' or the name of a registered adapter")
    p.add_argument("--weights", help="weights locator passed to the adapter")


def _add_pipeline(sub, name: str, pipeline: str, help_text: str) -> argparse.ArgumentParser:
    p = sub.add_parser(name, help=help_text)
    _add_common(p)
    for flag, spec in PIPELINE_FLAGS[pipeline].items():
        typ = spec[1] if isinstance(spec, tuple) else spec
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ)
    p.set_defaults(pipeline=pipeline)
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vectorsketch", description="Vector sketch generation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    _add_pipeline(sub, "sketch-object", "object", "abstract sketch of an object image")
    _add_pipeline(sub, "sketch-scene", "scene", "fidelity/simplicity matrix of scene sketches")
    wp = _add_pipeline(sub, "word-as-image", "word", "deform letters to illustrate a word")
    wp.add_argument("--letters", type=lambda s: [int(x) for x in s.split(",") if x != ""],
                    help="comma-separated letter indices (default: all)")
    _add_pipeline(sub, "animate", "animate", "animate a sketch from a text prompt")

    cp = sub.add_parser("concept-tree", help="grow or sample concept trees")
    csub = cp.add_subparsers(dest="tree_command", required=True)
    _add_pipeline(csub, "grow", "concept", "grow a tree from an image folder")
    sp = csub.add_parser("sample", help="generate images for a prompt with tree tokens")
    sp.add_argument("--tree", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--backend", default="mock")

    mp = sub.add_parser("metrics", help="evaluation metrics (CSV on stdout or --out)")
    msub = mp.add_subparsers(dest="metric", required=True)
    d = msub.add_parser("diversity", help="normalised variance of a sketch set")
    d.add_argument("dir")
    m = msub.add_parser("msssim", help="MS-SSIM of two images or of same-named files in two folders")
    m.add_argument("a")
    m.add_argument("b")
    r = msub.add_parser("recognize", help="top-5 overlap pass rate from two prediction JSON files")
    r.add_argument("--image-pred", required=True)
    r.add_argument("--sketch-pred", required=True)
    c = msub.add_parser("consistency", help="consistency matrix of image folders")
    c.add_argument("dirs", nargs="+")
    c.add_argument("--backend", default="mock")
    for q in (d, m, r, c):
        q.add_argument("--out", help="write CSV here instead of stdout")
    return ap


def config_from_args(args: argparse.Namespace, environ=None) -> RunConfig:
    raw: dict = {}
    if args.config:
        try:
            raw = yaml.safe_load(Path(args.config).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{args.config}: invalid YAML ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        if raw.get("pipeline", args.pipeline) != args.pipeline:
            raise ConfigError(f"config is for pipeline {raw['pipeline']!r}, not {args.pipeline!r}")
    raw = deep_merge(raw, env_overrides(environ))
    raw["pipeline"] = args.pipeline
    block = dict(raw.get(args.pipeline) or {})
    for flag, spec in PIPELINE_FLAGS[args.pipeline].items():
        val = getattr(args, flag, None)
        if val is not None:
            block[spec[0] if isinstance(spec, tuple) else flag] = val
    if getattr(args, "letters", None) is not None:
        block["letters"] = args.letters
    raw[args.pipeline] = block
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["output_dir"] = args.out
    if args.backend is not None:
        backend = dict(raw.get("backend") or {})
        if args.backend == "mock":
            backend.update(kind="mock", adapter=None)
        else:
            backend.update(kind="adapter", adapter=args.backend)
        raw["backend"] = backend
    if args.weights is not None:
        raw.setdefault("backend", {})["weights"] = args.weights
    return config_from_dict(raw, environ={})


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _metric_backend(name: str) -> Backends:
    from .config import BackendSpec

    return load_backends(BackendSpec(kind="mock") if name == "mock" else BackendSpec(kind="adapter", adapter=name))


def run_metrics(args: argparse.Namespace) -> None:
    if args.metric == "diversity":
        imgs = [load_image(p, 1)[..., 0] for p in list_images(args.dir)]
        _emit(_csv([["diversity", _fmt(em.diversity(imgs))]], ["metric", "value"]), args.out)
    elif args.metric == "msssim":
        a, b = Path(args.a), Path(args.b)
        if a.is_dir() and b.is_dir():
            pairs = [(p, b / p.name) for p in list_images(a) if (b / p.name).exists()]
            if not pairs:
                raise ConfigError("no same-named images in the two folders")
        else:
            pairs = [(a, b)]
        rows = [[p.name, _fmt(em.msssim(load_image(p, 1), load_image(q, 1)))] for p, q in pairs]
        _emit(_csv(rows, ["image", "msssim"]), args.out)
    elif args.metric == "recognize":
        ip, sp = em.load_predictions(args.image_pred), em.load_predictions(args.sketch_pred)
        keys = sorted(set(ip) & set(sp))
        if not keys:
            raise ConfigError("prediction files share no items")
        rows = [[k, int(em.top5_overlap_pass(ip[k], sp[k]))] for k in keys]
        rate = sum(r[1] for r in rows) / len(rows)
        _emit(_csv(rows + [["pass_rate", _fmt(rate)]], ["item", "pass"]), args.out)
    elif args.metric == "consistency":
        be = _metric_backend(args.backend)
        sets = [[load_image(p, 3) for p in list_images(d)] for d in args.dirs]
        m = em.consistency_matrix(sets, be.encoder)
        names = [Path(d).name for d in args.dirs]
        rows = [[names[i]] + [_fmt(float(v)) for v in m[i]] for i in range(len(names))]
        _emit(_csv(rows, ["set"] + names), args.out)


def run_sample(args: argparse.Namespace) -> None:
    be = _metric_backend(args.backend)
    tree = ct.read_tree(args.tree, load_images=False)
    cond = ct.condition_for_prompt(args.prompt, tree.registry())
    if args.n < 1:
        raise ConfigError("--n must be positive")
    imgs = ct.sample_set(cond, args.n, be.generator, rng_stream(args.seed, "concept/sample"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(imgs):
        save_png(im, out / f"sample_{i:03d}.png")
    (out / "prompt.json").write_text(json.dumps({"prompt": args.prompt, "seed": args.seed, "n": args.n},
                                                sort_keys=True) + "\n")
    write_gallery(out, args.prompt)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "metrics":
            run_metrics(args)
        elif args.command == "concept-tree" and args.tree_command == "sample":
            run_sample(args)
        else:
            out = execute(config_from_args(args))
            print(f"wrote {out}")
        return 0
    except (ConfigError, DomainError, UnsupportedElementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except VectorSketchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
