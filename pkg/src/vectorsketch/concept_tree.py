"""Binary concept trees of learned token embeddings.

Each split trains a pair of sibling embeddings so that the prompt
"A photograph of <left> <right>" reconstructs the parent's images, probes a few
seeds, keeps the pair whose image sets are coherent and distinct, and
continues training the winner.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import DomainError
from .guidance import (
    DTYPE,
    EmbeddingGenerator,
    ImageEncoder,
    TextCondition,
    cosine_similarity,
    ldm_objective,
    prompt_placeholders,
    sample_timestep_skewed,
)
from .raster import load_image, save_png

TOKEN_FORMAT = "<v{}>"
EMBEDDING_SUFFIX = ".f32"


@dataclass
class TreeGrowConfig:
    k_seeds: int = 4
    probe_steps: int = 200
    final_steps: int = 1500
    parent_set_size: int = 10
    node_sample_size: int = 40
    timestep_alpha: float = 0.5
    prompt_template: str = "A photograph of {left} {right}"
    node_template: str = "A photograph of {0}"
    init_word: str = "object"
    max_depth: int = 2
    stop_threshold: float = 0.65
    lr: float = 5e-3

    def __post_init__(self):
        ints = (self.k_seeds, self.parent_set_size, self.node_sample_size)
        if min(ints) < 1 or self.probe_steps < 0 or self.final_steps < 0 or self.max_depth < 0:
            raise DomainError("tree config counts must be positive")
        if self.node_sample_size < 2:
            raise DomainError("node_sample_size must be >= 2 to measure self-consistency")
        if not 0.0 <= self.timestep_alpha < 1.0 or self.lr <= 0:
            raise DomainError("timestep_alpha must lie in [0, 1) and lr be positive")


@dataclass
class SeedCandidate:
    seed: int
    left: np.ndarray
    right: np.ndarray
    C_l: float
    C_r: float
    C_cross: float
    trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        for name in ("C_l", "C_r", "C_cross"):
            v = getattr(self, name)
            if not -1.0 - 1e-9 <= v <= 1.0 + 1e-9:
                raise DomainError(f"{name}={v} outside [-1, 1]")

    @property
    def score(self) -> float:
        return selection_score(self.C_l, self.C_r, self.C_cross)


@dataclass
class ConceptNode:
    token: str
    embedding: np.ndarray | None  # None only at the root, which is the input set
    images: list[np.ndarray] = field(default_factory=list)
    self_consistency: float | None = None
    children: tuple[str, str] | None = None
    parent: str | None = None
    depth: int = 0
    cross_consistency: float | None = None  # with the sibling
    candidates: list[dict] = field(default_factory=list)  # probe summaries when split
    selected_seed: int | None = None


@dataclass
class ConceptTree:
    nodes: dict[str, ConceptNode]
    root: str
    next_id: int = 1

    def new_token(self, dictionary: Sequence[str] = ()) -> str:
        while True:
            tok = TOKEN_FORMAT.format(self.next_id)
            self.next_id += 1
            if tok not in self.nodes and tok not in dictionary:
                return tok

    def registry(self) -> dict[str, np.ndarray]:
        return {t: n.embedding for t, n in self.nodes.items() if n.embedding is not None}

    def leaves(self) -> list[str]:
        return [t for t, n in self.nodes.items() if n.children is None]

    @property
    def splits(self) -> int:
        return sum(1 for n in self.nodes.values() if n.children is not None)


# ----------------------------------------------------------------------------
# consistency


def _embed_set(images, enc: ImageEncoder) -> torch.Tensor:
    with torch.no_grad():
        return torch.stack([enc.embed(im) for im in images])


def consistency_from_embeddings(ea: torch.Tensor, eb: torch.Tensor, same: bool) -> float:
    """Mean pairwise cosine; with ``same`` the (i, i) pairs are skipped."""
    na, nb = torch.linalg.norm(ea, dim=1), torch.linalg.norm(eb, dim=1)
    if (na == 0).any() or (nb == 0).any():
        cosine_similarity(ea[0] * 0, eb[0])  # raises the zero-norm error
    sim = (ea / na[:, None]) @ (eb / nb[:, None]).T
    if same:
        n = sim.shape[0]
        if n < 2:
            raise DomainError("self-consistency needs at least two images")
        return float((sim.sum() - torch.diagonal(sim).sum()) / (n * (n - 1)))
    return float(sim.mean())


def consistency(set_a, set_b, enc: ImageEncoder, same: bool | None = None) -> float:
    """Mean cosine similarity between encoder embeddings of every pair drawn
    from the two sets, excluding an image paired with itself. ``same``
    defaults to ``set_a is set_b``."""
    if len(set_a) == 0 or len(set_b) == 0:
        raise DomainError("consistency needs non-empty image sets")
    same = (set_a is set_b) if same is None else same
    if same and len(set_a) != len(set_b):
        raise DomainError("same=True requires one set")
    ea = _embed_set(set_a, enc)
    eb = ea if same else _embed_set(set_b, enc)
    return consistency_from_embeddings(ea, eb, same)


def consistency_matrix(sets: Sequence[Sequence], enc: ImageEncoder) -> np.ndarray:
    """M[i, j] = consistency(set_i, set_j); the diagonal is self-consistency."""
    embs = [_embed_set(s, enc) for s in sets]
    for s in sets:
        if len(s) < 2:
            raise DomainError("each set needs at least two images")
    n = len(sets)
    m = np.zeros((n, n))
    for i in range(n):
        m[i, i] = consistency_from_embeddings(embs[i], embs[i], True)
        for j in range(i + 1, n):
            m[i, j] = m[j, i] = consistency_from_embeddings(embs[i], embs[j], False)
    return m


def selection_score(c_l: float, c_r: float, c_cross: float) -> float:
    return c_l + c_r + (min(c_l, c_r) - c_cross)


def select_seed(candidates: Sequence[SeedCandidate]) -> SeedCandidate:
    """Highest C_l + C_r + (min(C_l, C_r) - C_cross); ties go to the lowest seed."""
    if not candidates:
        raise DomainError("select_seed needs at least one candidate")
    return min(candidates, key=lambda c: (-c.score, c.seed))


# ----------------------------------------------------------------------------
# prompts


def compose_prompt(tokens: Sequence[str], template: str, registry: dict[str, np.ndarray]) -> TextCondition:
    """Fill ``template`` positionally ({0}, {1}, ...) and attach the tokens'
    embeddings as condition slots."""
    missing = [t for t in tokens if t not in registry]
    if missing:
        raise DomainError(f"unknown token(s): {missing}")
    try:
        prompt = template.format(*tokens)
    except (IndexError, KeyError) as exc:
        raise DomainError(f"template {template!r} does not fit {len(tokens)} token(s)") from exc
    slots = {t: torch.as_tensor(registry[t], dtype=DTYPE) for t in tokens}
    return TextCondition(prompt, token_slots=slots)


def condition_for_prompt(prompt: str, registry: dict[str, np.ndarray]) -> TextCondition:
    """Condition for a free-form prompt that already contains placeholders."""
    tokens = parse_prompt_tokens(prompt)
    missing = [t for t in tokens if t not in registry]
    if missing:
        raise DomainError(f"unknown token(s): {missing}")
    return TextCondition(prompt, token_slots={t: torch.as_tensor(registry[t], dtype=DTYPE) for t in tokens})


def parse_prompt_tokens(prompt: str) -> list[str]:
    return prompt_placeholders(prompt)


# ----------------------------------------------------------------------------
# training


@dataclass
class PairState:
    left: np.ndarray
    right: np.ndarray
    optimizer_state: dict | None = None


def _epoch_sampler(n: int, rng: np.random.Generator) -> Callable[[], int]:
    """Index sampler drawing a fresh permutation every n draws."""
    order: list[int] = []

    def draw() -> int:
        if not order:
            order.extend(rng.permutation(n).tolist())
        return order.pop()

    return draw


def train_pair(parent_images: Sequence, pair: PairState, steps: int, gen: EmbeddingGenerator,
               rng: np.random.Generator, cfg: TreeGrowConfig | None = None,
               sampler: Callable[[np.random.Generator], int] | None = None,
               tokens: tuple[str, str] = ("<left>", "<right>")) -> tuple[PairState, list[float]]:
    """Adam on the two sibling embeddings against the LDM loss. Parent images
    are drawn in shuffled epochs; timesteps come from ``sampler`` (skewed
    towards large t by default)."""
    cfg = cfg or TreeGrowConfig()
    if len(parent_images) == 0:
        raise DomainError("train_pair needs parent images")
    T = int(getattr(gen, "sched").T) if hasattr(gen, "sched") else 1000
    sampler = sampler or (lambda r: sample_timestep_skewed(T, cfg.timestep_alpha, r))
    left = torch.tensor(np.asarray(pair.left, dtype=float), dtype=DTYPE, requires_grad=True)
    right = torch.tensor(np.asarray(pair.right, dtype=float), dtype=DTYPE, requires_grad=True)
    opt = torch.optim.Adam([left, right], lr=cfg.lr)
    if pair.optimizer_state is not None:
        opt.load_state_dict(pair.optimizer_state)
    prompt = cfg.prompt_template.format(left=tokens[0], right=tokens[1])
    pick = _epoch_sampler(len(parent_images), rng)
    trace = []
    for _ in range(steps):
        img = parent_images[pick()]
        t = int(sampler(rng))
        cond = TextCondition(prompt, token_slots={tokens[0]: left.detach(), tokens[1]: right.detach()})
        size = getattr(gen, "size", None)
        shape = (size, size) if size else np.asarray(img).shape[:2]
        eps = rng.standard_normal(shape)
        loss, grads = ldm_objective(gen, img, t, cond, eps)
        opt.zero_grad()
        left.grad = torch.as_tensor(grads[tokens[0]], dtype=DTYPE).clone()
        right.grad = torch.as_tensor(grads[tokens[1]], dtype=DTYPE).clone()
        opt.step()
        trace.append(float(loss))
    return PairState(left.detach().numpy().copy(), right.detach().numpy().copy(), opt.state_dict()), trace


def block_means(trace: Sequence[float], window: int = 100) -> list[float]:
    """Means of consecutive non-overlapping windows (a trailing partial
    window is dropped)."""
    n = len(trace) // window
    return [math.fsum(trace[i * window:(i + 1) * window]) / window for i in range(n)]


def moving_average(trace: Sequence[float], window: int = 100) -> np.ndarray:
    x = np.asarray(trace, dtype=float)
    if len(x) < window:
        return np.zeros(0)
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[window:] - c[:-window]) / window


def sample_set(cond: TextCondition, n: int, gen: EmbeddingGenerator, rng: np.random.Generator) -> list[np.ndarray]:
    return [gen.generate(cond, rng) for _ in range(n)]


def _node_condition(token: str, emb: np.ndarray, cfg: TreeGrowConfig) -> TextCondition:
    return compose_prompt([token], cfg.node_template, {token: emb})


# ----------------------------------------------------------------------------
# growth


def split_node(tree: ConceptTree, token: str, cfg: TreeGrowConfig, gen: EmbeddingGenerator,
               enc: ImageEncoder, rng: np.random.Generator) -> tuple[str, str]:
    """Split one node in place and return the new child tokens.

    Probe seeds run in order; for each, the left set then the right set of
    ``node_sample_size`` images is generated."""
    node = tree.nodes[token]
    if node.children is not None:
        raise DomainError(f"{token} is already split")
    if node.embedding is None:
        parent_images = list(node.images)
    else:
        parent_images = sample_set(_node_condition(token, node.embedding, cfg), cfg.parent_set_size, gen, rng)
    if not parent_images:
        raise DomainError(f"{token} has no images to split")
    init = gen.word_embedding(cfg.init_word).detach().numpy().astype(float)
    seeds = [int(s) for s in rng.integers(0, 2 ** 31 - 1, size=cfg.k_seeds)]
    states, cands = [], []
    for seed in seeds:
        state, trace = train_pair(parent_images, PairState(init.copy(), init.copy()), cfg.probe_steps, gen,
                                  np.random.default_rng([seed, 0]), cfg)
        srng = np.random.default_rng([seed, 1])
        set_l = sample_set(_node_condition("<l>", state.left, cfg), cfg.node_sample_size, gen, srng)
        set_r = sample_set(_node_condition("<r>", state.right, cfg), cfg.node_sample_size, gen, srng)
        m = consistency_matrix([set_l, set_r], enc)
        states.append(state)
        cands.append(SeedCandidate(seed, state.left, state.right, m[0, 0], m[1, 1], m[0, 1], trace))
    best = select_seed(cands)
    idx = cands.index(best)
    final, _ = train_pair(parent_images, states[idx], cfg.final_steps, gen,
                          np.random.default_rng([best.seed, 2]), cfg)
    lt = tree.new_token()
    rt = tree.new_token()
    frng = np.random.default_rng([best.seed, 3])
    imgs_l = sample_set(_node_condition(lt, final.left, cfg), cfg.node_sample_size, gen, frng)
    imgs_r = sample_set(_node_condition(rt, final.right, cfg), cfg.node_sample_size, gen, frng)
    m = consistency_matrix([imgs_l, imgs_r], enc)
    for tok, emb, imgs, c in ((lt, final.left, imgs_l, m[0, 0]), (rt, final.right, imgs_r, m[1, 1])):
        tree.nodes[tok] = ConceptNode(tok, emb, imgs, float(c), None, token, node.depth + 1, float(m[0, 1]))
    node.children = (lt, rt)
    node.selected_seed = best.seed
    node.candidates = [
        {"seed": c.seed, "C_l": c.C_l, "C_r": c.C_r, "C_cross": c.C_cross, "score": c.score,
         "probe_loss": c.trace}
        for c in cands
    ]
    return lt, rt


def new_tree(root_images: Sequence, enc: ImageEncoder) -> ConceptTree:
    if len(root_images) == 0:
        raise DomainError("root image set is empty")
    images = [np.asarray(im, dtype=float) for im in root_images]
    c = consistency(images, images, enc) if len(images) >= 2 else None
    root = TOKEN_FORMAT.format(0)
    return ConceptTree({root: ConceptNode(root, None, images, c)}, root)


def grow_tree(root_images: Sequence, cfg: TreeGrowConfig, gen: EmbeddingGenerator, enc: ImageEncoder,
              rng: np.random.Generator) -> ConceptTree:
    """Breadth-first splitting up to ``max_depth``. A node whose
    self-consistency is below ``stop_threshold`` stays a leaf."""
    tree = new_tree(root_images, enc)
    queue = deque([tree.root])
    while queue:
        tok = queue.popleft()
        node = tree.nodes[tok]
        if node.depth >= cfg.max_depth:
            continue
        if node.self_consistency is not None and node.self_consistency < cfg.stop_threshold:
            continue
        queue.extend(split_node(tree, tok, cfg, gen, enc, rng))
    return tree


# ----------------------------------------------------------------------------
# persistence
#
# <dir>/nodes.json                     topology, tokens, scores, embedding dim
# <dir>/embeddings/v<K>.f32            dim little-endian float32 values, no header
# <dir>/images/v<K>/NNN.png            the node's sampled (or input) images


def _slug(token: str) -> str:
    return token.strip("<>")


def write_tree(tree: ConceptTree, directory) -> Path:
    d = Path(directory)
    (d / "embeddings").mkdir(parents=True, exist_ok=True)
    nodes = []
    dim = None
    for tok, n in tree.nodes.items():
        entry = {
            "token": tok, "parent": n.parent, "children": list(n.children) if n.children else None,
            "depth": n.depth, "self_consistency": n.self_consistency,
            "cross_consistency": n.cross_consistency, "selected_seed": n.selected_seed,
            "candidates": n.candidates, "num_images": len(n.images),
        }
        if n.embedding is not None:
            dim = len(n.embedding)
            rel = f"embeddings/{_slug(tok)}{EMBEDDING_SUFFIX}"
            (d / rel).write_bytes(np.asarray(n.embedding, dtype="<f4").tobytes())
            entry["embedding_file"] = rel
        img_dir = d / "images" / _slug(tok)
        img_dir.mkdir(parents=True, exist_ok=True)
        for i, im in enumerate(n.images):
            save_png(im, img_dir / f"{i:03d}.png")
        entry["images_dir"] = f"images/{_slug(tok)}"
        nodes.append(entry)
    meta = {"format": 1, "root": tree.root, "next_id": tree.next_id, "embedding_dim": dim, "nodes": nodes}
    (d / "nodes.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def read_tree(directory, load_images: bool = True) -> ConceptTree:
    d = Path(directory)
    try:
        meta = json.loads((d / "nodes.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DomainError(f"cannot read tree at {d}: {exc}") from exc
    nodes = {}
    for e in meta["nodes"]:
        emb = None
        if e.get("embedding_file"):
            emb = np.frombuffer((d / e["embedding_file"]).read_bytes(), dtype="<f4").astype(float)
        imgs = []
        if load_images:
            for p in sorted((d / e["images_dir"]).glob("*.png")):
                im = load_image(p, channels=1)
                imgs.append(im)
        children = tuple(e["children"]) if e.get("children") else None
        nodes[e["token"]] = ConceptNode(e["token"], emb, imgs, e.get("self_consistency"), children,
                                        e.get("parent"), e.get("depth", 0), e.get("cross_consistency"),
                                        e.get("candidates") or [], e.get("selected_seed"))
    return ConceptTree(nodes, meta["root"], meta.get("next_id", len(nodes)))
