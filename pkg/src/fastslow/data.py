"""Deterministic synthetic scenes with grammar-generated captions.

A scene places 1..max_objects attributed shapes on a G x G grid and is
rasterised to a G' x G' x 3 image. Captions chain object phrases with
spatial relations, e.g. ``a large red circle left of a small blue square``.
With ``unique_gold`` every scene's first (gold) caption describes no other
scene in the dataset.

File format (UTF-8, one record per line)::

    #fastslow-dataset v1 seed=<u64> config=<hex-hash>
    {"type": "config", ...}
    {"type": "vocab", "tokens": [...]}
    {"type": "scene", "id": 0, "split": "train", "objects": [[shape, color, size, row, col], ...]}
    ...
    {"type": "caption", "id": 0, "scene": 0, "text": "...", "tokens": [...]}
    ...
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import atomic_write_text

FORMAT_VERSION = 1
PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

SHAPES = ("circle", "square", "triangle", "bar")
COLORS = ("red", "green", "blue", "yellow", "purple", "cyan")
SIZES = ("small", "large")
RELATIONS = ("left of", "right of", "above", "below")
SPLITS = ("train", "val", "test")

RGB = {
    "red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0), "purple": (1.0, 0.0, 1.0), "cyan": (0.0, 1.0, 1.0),
    "white": (1.0, 1.0, 1.0), "orange": (1.0, 0.5, 0.0),
}


class CapacityError(ValueError):
    """The configuration cannot produce the requested number of distinct scenes."""


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 500
    n_val: int = 100
    n_test: int = 200
    grid: int = 4
    raster: int = 32
    min_objects: int = 1
    max_objects: int = 2
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = COLORS
    sizes: tuple[str, ...] = SIZES
    captions_per_scene: int = 3
    twin_fraction: float = 0.3
    unique_gold: bool = True
    max_caption_len: int = 16

    def __post_init__(self):
        if self.raster % self.grid:
            raise ValueError("raster must be a multiple of grid")
        if not 1 <= self.min_objects <= self.max_objects <= self.grid ** 2:
            raise ValueError("need 1 <= min_objects <= max_objects <= grid**2")
        if self.captions_per_scene < 1:
            raise ValueError("captions_per_scene must be >= 1")
        unknown = set(self.colors) - set(RGB)
        if unknown:
            raise ValueError(f"no RGB value for colors {sorted(unknown)}")
        if self.max_caption_len < 5 * self.max_objects + 2 * (self.max_objects - 1) - 1:
            raise ValueError("max_caption_len too small for max_objects")

    @property
    def total(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Object:
    shape: str
    color: str
    size: str
    row: int
    col: int

    @property
    def attrs(self) -> tuple[str, str, str]:
        return self.shape, self.color, self.size

    def phrase(self) -> str:
        return f"a {self.size} {self.color} {self.shape}"


@dataclass(frozen=True)
class Scene:
    id: int
    objects: tuple[Object, ...]
    split: str


@dataclass(frozen=True)
class Caption:
    id: int
    scene_id: int
    tokens: tuple[int, ...]
    text: str

    @property
    def content(self) -> tuple[int, ...]:
        return self.tokens[1:-1]


class Vocabulary:
    def __init__(self, words: Sequence[str]):
        self.tokens: tuple[str, ...] = tuple(SPECIALS) + tuple(w for w in words if w not in SPECIALS)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")

    @classmethod
    def for_config(cls, config: DataConfig) -> "Vocabulary":
        words = ["a", *config.sizes, *config.colors, *config.shapes]
        for rel in RELATIONS:
            words.extend(w for w in rel.split() if w not in words)
        return cls(words)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, word: str) -> int:
        return self.index.get(word, UNK)


def tokenize(text: str, vocab: Vocabulary, caption_id: int = -1, scene_id: int = -1) -> Caption:
    words = text.split()
    if not words:
        raise ValueError("cannot tokenize empty text")
    tokens = (BOS, *(vocab.id(w) for w in words), EOS)
    return Caption(caption_id, scene_id, tokens, " ".join(words))


def detokenize(caption: Caption | Sequence[int], vocab: Vocabulary) -> str:
    tokens = caption.tokens if isinstance(caption, Caption) else caption
    return " ".join(vocab.tokens[t] for t in tokens if t not in (PAD, BOS, EOS))


# ---------------------------------------------------------------- grammar

def relation(a: Object, b: Object) -> str:
    """Where ``a`` lies relative to ``b``; the dominant axis wins, columns on ties."""
    dr, dc = b.row - a.row, b.col - a.col
    if abs(dc) >= abs(dr):
        return "left of" if dc > 0 else "right of"
    return "above" if dr > 0 else "below"


def describe(ordered: Sequence[Object]) -> str:
    parts = [ordered[0].phrase()]
    for prev, nxt in zip(ordered, ordered[1:]):
        parts.append(f"{relation(prev, nxt)} {nxt.phrase()}")
    return " ".join(parts)


def canonical_order(objects: Iterable[Object]) -> tuple[Object, ...]:
    return tuple(sorted(objects, key=lambda o: (o.row, o.col)))


def gold_text(objects: Sequence[Object]) -> str:
    return describe(canonical_order(objects))


def parse_caption(text: str) -> tuple[list[tuple[str, str, str]], list[str]]:
    """Inverse of :func:`describe`: object attribute triples and the relations between them."""
    words = text.split()
    objs, rels = [], []
    i = 0
    while True:
        if i + 4 > len(words) or words[i] != "a":
            raise ValueError(f"not a grammar caption: {text!r}")
        size, color, shape = words[i + 1:i + 4]
        objs.append((shape, color, size))
        i += 4
        if i == len(words):
            return objs, rels
        if words[i] in ("left", "right"):
            if i + 1 >= len(words) or words[i + 1] != "of":
                raise ValueError(f"not a grammar caption: {text!r}")
            rels.append(f"{words[i]} of")
            i += 2
        elif words[i] in ("above", "below"):
            rels.append(words[i])
            i += 1
        else:
            raise ValueError(f"not a grammar caption: {text!r}")


def caption_matches(text: str, objects: Sequence[Object]) -> bool:
    """True iff the caption is a valid description of a scene with exactly these objects."""
    attrs, rels = parse_caption(text)
    if len(attrs) != len(objects):
        return False
    for perm in itertools.permutations(objects):
        if all(o.attrs == a for o, a in zip(perm, attrs)) and all(
                relation(p, q) == r for p, q, r in zip(perm, perm[1:], rels)):
            return True
    return False


# ---------------------------------------------------------------- rendering

def _shape_mask(shape: str, s: int) -> np.ndarray:
    u = (np.arange(s) + 0.5)[:, None] / s
    v = (np.arange(s) + 0.5)[None, :] / s
    if shape == "circle":
        m = (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif shape == "square":
        m = (u >= 0.1) & (u <= 0.9) & (v >= 0.1) & (v <= 0.9)
    elif shape == "triangle":
        m = np.abs(v - 0.5) <= u / 2
    elif shape == "bar":
        m = (u >= 0.35) & (u <= 0.65) & (v >= 0.0)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def render(objects: Sequence[Object], config: DataConfig) -> np.ndarray:
    img = np.zeros((config.raster, config.raster, 3))
    cell = config.raster // config.grid
    for o in objects:
        s = cell if o.size == "large" else max(cell // 2, 2)
        off = (cell - s) // 2
        r0, c0 = o.row * cell + off, o.col * cell + off
        mask = _shape_mask(o.shape, s)
        img[r0:r0 + s, c0:c0 + s][mask] = RGB[o.color]
    return img


# ---------------------------------------------------------------- dataset

@dataclass
class Dataset:
    config: DataConfig
    seed: int
    vocab: Vocabulary
    scenes: list[Scene]
    captions: list[Caption]
    _renders: dict = field(default_factory=dict, repr=False, compare=False)
    _by_scene: dict = field(default_factory=dict, repr=False, compare=False)

    def split_ids(self, split: str) -> list[int]:
        return [s.id for s in self.scenes if s.split == split]

    def scene(self, scene_id: int) -> Scene:
        return self.scenes[scene_id]

    def captions_of(self, scene_id: int) -> list[Caption]:
        if not self._by_scene:
            for c in self.captions:
                self._by_scene.setdefault(c.scene_id, []).append(c)
        return self._by_scene[scene_id]

    def gold_caption(self, scene_id: int) -> Caption:
        return self.captions_of(scene_id)[0]

    def render(self, scene_id: int) -> np.ndarray:
        img = self._renders.get(scene_id)
        if img is None:
            img = self._renders[scene_id] = render(self.scenes[scene_id].objects, self.config)
        return img

    def renders(self, ids: Sequence[int]) -> np.ndarray:
        if len(ids) == 0:
            r = self.config.raster
            return np.zeros((0, r, r, 3))
        return np.stack([self.render(i) for i in ids])


def _all_placements(config: DataConfig):
    cells = [(r, c) for r in range(config.grid) for c in range(config.grid)]
    kinds = list(itertools.product(config.shapes, config.colors, config.sizes))
    for k in range(config.min_objects, config.max_objects + 1):
        for where in itertools.combinations(cells, k):
            for what in itertools.product(kinds, repeat=k):
                yield tuple(Object(s, c, z, r, q) for (s, c, z), (r, q) in zip(what, where))


def scene_space_size(config: DataConfig) -> int:
    cells = config.grid ** 2
    kinds = len(config.shapes) * len(config.colors) * len(config.sizes)
    return sum(math.comb(cells, k) * kinds ** k
               for k in range(config.min_objects, config.max_objects + 1))


def capacity(config: DataConfig, limit: int = 50_000) -> int | None:
    """Upper bound on distinguishable scenes, or None when too large to enumerate."""
    if scene_space_size(config) > limit:
        return None
    if not config.unique_gold:
        return scene_space_size(config)
    return len({gold_text(objs) for objs in _all_placements(config)})


class _Registry:
    """Tracks accepted scenes so that no gold caption describes two scenes."""

    def __init__(self, unique: bool):
        self.unique = unique
        self.by_bag: dict[tuple, list[tuple[tuple[Object, ...], str]]] = {}

    @staticmethod
    def bag(objects) -> tuple:
        return tuple(sorted(o.attrs for o in objects))

    def admit(self, objects: tuple[Object, ...]) -> bool:
        gold = gold_text(objects)
        peers = self.by_bag.setdefault(self.bag(objects), [])
        if self.unique:
            for other, other_gold in peers:
                if caption_matches(gold, other) or caption_matches(other_gold, objects):
                    return False
        elif any(set(other) == set(objects) for other, _ in peers):
            return False
        peers.append((objects, gold))
        return True


def _random_scene(rng: np.random.Generator, config: DataConfig) -> tuple[Object, ...]:
    k = int(rng.integers(config.min_objects, config.max_objects + 1))
    cells = rng.choice(config.grid ** 2, size=k, replace=False)
    objs = []
    for cell in cells:
        objs.append(Object(
            shape=config.shapes[int(rng.integers(len(config.shapes)))],
            color=config.colors[int(rng.integers(len(config.colors)))],
            size=config.sizes[int(rng.integers(len(config.sizes)))],
            row=int(cell) // config.grid, col=int(cell) % config.grid))
    return tuple(objs)


def _twin(rng: np.random.Generator, objects: tuple[Object, ...]) -> tuple[Object, ...] | None:
    """Same shapes, sizes and positions with the colours permuted among objects."""
    colors = [o.color for o in objects]
    if len(set(colors)) < 2:
        return None
    for _ in range(8):
        perm = [colors[i] for i in rng.permutation(len(colors))]
        if perm != colors:
            return tuple(dataclasses.replace(o, color=c) for o, c in zip(objects, perm))
    return None


def _assign_splits(rng, groups: list[list], config: DataConfig) -> list[str]:
    need = {"test": config.n_test, "val": config.n_val, "train": config.n_train}
    labels: list[str | None] = [None] * sum(len(g) for g in groups)
    starts = np.cumsum([0] + [len(g) for g in groups])
    for gi in rng.permutation(len(groups)):
        members = range(starts[gi], starts[gi + 1])
        home = next((s for s in ("test", "val", "train") if need[s] >= len(members)), None)
        for m in members:
            split = home or next(s for s in ("test", "val", "train") if need[s] > 0)
            need[split] -= 1
            labels[m] = split
    return labels  # type: ignore[return-value]


def generate_dataset(config: DataConfig, seed: int) -> Dataset:
    cap = capacity(config)
    if cap is not None and config.total > cap:
        raise CapacityError(f"requested {config.total} distinct scenes but the "
                            f"attribute space admits only {cap}")
    rng = np.random.default_rng(seed)
    registry = _Registry(config.unique_gold)
    groups: list[list[tuple[Object, ...]]] = []
    count, attempts, budget = 0, 0, 200 * config.total + 1000
    while count < config.total:
        attempts += 1
        if attempts > budget:
            raise CapacityError(f"could only place {count} of {config.total} distinct scenes")
        objs = _random_scene(rng, config)
        if not registry.admit(objs):
            continue
        group = [objs]
        count += 1
        if count < config.total and len(objs) > 1 and rng.random() < config.twin_fraction:
            twin = _twin(rng, objs)
            if twin is not None and registry.admit(twin):
                group.append(twin)
                count += 1
        groups.append(group)

    splits = _assign_splits(rng, groups, config)
    vocab = Vocabulary.for_config(config)
    scenes, captions = [], []
    for sid, (objs, split) in enumerate(zip((o for g in groups for o in g), splits)):
        scenes.append(Scene(sid, objs, split))
        texts = [gold_text(objs)]
        others = [describe(p) for p in itertools.permutations(objs)]
        others = sorted(set(others) - set(texts))
        for idx in rng.permutation(len(others))[:config.captions_per_scene - 1]:
            texts.append(others[idx])
        for t in texts:
            captions.append(tokenize(t, vocab, caption_id=len(captions), scene_id=sid))
    return Dataset(config, seed, vocab, scenes, captions)


# ---------------------------------------------------------------- persistence

def _header(seed: int, config: DataConfig) -> str:
    return f"#fastslow-dataset v{FORMAT_VERSION} seed={seed} config={config.digest()}"


def dumps(ds: Dataset) -> str:
    lines = [_header(ds.seed, ds.config),
             json.dumps({"type": "config", **ds.config.to_dict()}, sort_keys=True),
             json.dumps({"type": "vocab", "tokens": list(ds.vocab.tokens)})]
    for s in ds.scenes:
        lines.append(json.dumps({"type": "scene", "id": s.id, "split": s.split,
                                 "objects": [[o.shape, o.color, o.size, o.row, o.col]
                                             for o in s.objects]}))
    for c in ds.captions:
        lines.append(json.dumps({"type": "caption", "id": c.id, "scene": c.scene_id,
                                 "text": c.text, "tokens": list(c.tokens)}))
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps(ds))


def loads(text: str) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith("#fastslow-dataset "):
        raise DatasetFormatError("line 1: missing #fastslow-dataset header")
    head = lines[0].split()
    try:
        version = head[1]
        fields = dict(kv.split("=", 1) for kv in head[2:])
        seed, digest = int(fields["seed"]), fields["config"]
    except (IndexError, KeyError, ValueError):
        raise DatasetFormatError("line 1: malformed header") from None
    if version != f"v{FORMAT_VERSION}":
        raise DatasetFormatError(f"format version mismatch: file has {version}, "
                                 f"reader expects v{FORMAT_VERSION}")

    def record(lineno: int, kind: str) -> dict:
        if lineno > len(lines):
            raise DatasetFormatError(f"line {lineno}: truncated file, expected a {kind} record")
        try:
            rec = json.loads(lines[lineno - 1])
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"line {lineno}: corrupt record ({exc.msg})") from None
        if not isinstance(rec, dict) or rec.get("type") != kind:
            raise DatasetFormatError(f"line {lineno}: expected a {kind} record")
        return rec

    cfg_rec = record(2, "config")
    cfg_rec.pop("type")
    try:
        config = DataConfig.from_dict(cfg_rec)
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line 2: bad config ({exc})") from None
    if config.digest() != digest:
        raise DatasetFormatError(f"config hash mismatch: header {digest}, "
                                 f"config record hashes to {config.digest()}")
    vocab = Vocabulary(record(3, "vocab")["tokens"][len(SPECIALS):])
    if vocab != Vocabulary.for_config(config):
        raise DatasetFormatError("line 3: vocabulary does not match config")

    scenes: list[Scene] = []
    lineno = 4
    for sid in range(config.total):
        rec = record(lineno, "scene")
        try:
            objs = tuple(Object(str(a), str(b), str(c), int(r), int(q)) for a, b, c, r, q in rec["objects"])
            if rec["id"] != sid or rec["split"] not in SPLITS or not objs:
                raise ValueError
        except (KeyError, TypeError, ValueError):
            raise DatasetFormatError(f"line {lineno}: invalid scene record") from None
        scenes.append(Scene(sid, objs, rec["split"]))
        lineno += 1

    captions: list[Caption] = []
    while lineno <= len(lines):
        rec = record(lineno, "caption")
        try:
            cap = tokenize(rec["text"], vocab, caption_id=rec["id"], scene_id=rec["scene"])
            if (rec["id"] != len(captions) or list(cap.tokens) != rec["tokens"]
                    or not 0 <= rec["scene"] < len(scenes)):
                raise ValueError
        except (KeyError, TypeError, ValueError):
            raise DatasetFormatError(f"line {lineno}: invalid caption record") from None
        captions.append(cap)
        lineno += 1
    covered = {c.scene_id for c in captions}
    if len(covered) != len(scenes):
        raise DatasetFormatError(f"line {lineno}: truncated file, "
                                 f"{len(scenes) - len(covered)} scenes have no caption")
    return Dataset(config, seed, vocab, scenes, captions)


def load_dataset(path: str | os.PathLike) -> Dataset:
    return loads(Path(path).read_text(encoding="utf-8"))
