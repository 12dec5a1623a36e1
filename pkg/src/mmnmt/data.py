"""Parallel corpora, image feature packs, the planted-signal synthetic task,
mini-batching and attention-map export."""
from __future__ import annotations

import csv
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import init_orthogonal, make_rng
from .vocab import PAD_ID, Vocabulary

log = logging.getLogger(__name__)

PACK_MAGIC = b"MMAF"
PACK_VERSION = 1
_PACK_HEADER = struct.Struct("<4sIIII")


# ------------------------------------------------------------- feature packs

@dataclass
class FeaturePack:
    """Per-example L x D image annotation grids, location-major."""

    features: np.ndarray  # (count, L, D) float32

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 3:
            raise ValueError(f"feature pack needs a (count, L, D) array, got {self.features.shape}")

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def n_locations(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def write(self, path) -> None:
        with open(path, "wb") as f:
            f.write(_PACK_HEADER.pack(PACK_MAGIC, PACK_VERSION, self.count, self.n_locations, self.dim))
            f.write(self.features.astype("<f4", copy=False).tobytes())

    @classmethod
    def read(cls, path, expect_locations: Optional[int] = None, expect_dim: Optional[int] = None):
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < _PACK_HEADER.size:
            raise ValueError(f"{path}: truncated feature header")
        magic, version, count, L, D = _PACK_HEADER.unpack_from(raw)
        if magic != PACK_MAGIC:
            raise ValueError(f"{path}: bad feature pack magic {magic!r}")
        if version != PACK_VERSION:
            raise ValueError(f"{path}: unsupported feature pack version {version}")
        expected = count * L * D * 4
        if len(raw) - _PACK_HEADER.size != expected:
            raise ValueError(f"{path}: payload is {len(raw) - _PACK_HEADER.size} bytes, header implies {expected}")
        if expect_locations is not None and L != expect_locations:
            raise ValueError(f"{path}: pack has L={L}, configuration expects {expect_locations}")
        if expect_dim is not None and D != expect_dim:
            raise ValueError(f"{path}: pack has D={D}, configuration expects {expect_dim}")
        arr = np.frombuffer(raw, dtype="<f4", offset=_PACK_HEADER.size).reshape(count, L, D)
        return cls(arr.astype(np.float32))


# ------------------------------------------------------------------ corpora

@dataclass
class ParallelCorpus:
    src: list
    tgt: list
    features: Optional[np.ndarray] = None       # (count, L, D)
    feat_index: Optional[np.ndarray] = None     # per sentence row into features
    meta: dict = field(default_factory=dict)    # synthetic-task annotations
    src_vocab: Optional[Vocabulary] = None
    tgt_vocab: Optional[Vocabulary] = None

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise ValueError(f"source has {len(self.src)} sentences, target has {len(self.tgt)}")
        if self.features is not None:
            if self.feat_index is None:
                self.feat_index = np.arange(len(self.src))
            self.feat_index = np.asarray(self.feat_index, dtype=np.int64)
            if len(self.feat_index) != len(self.src):
                raise ValueError("feature index count differs from sentence count")
            if len(self.feat_index) and (self.feat_index.min() < 0 or self.feat_index.max() >= len(self.features)):
                raise ValueError(f"feature index out of range for {len(self.features)} feature grids")

    def __len__(self):
        return len(self.src)

    def build_vocabs(self, min_count: int = 1):
        self.src_vocab = Vocabulary.build(self.src, min_count)
        self.tgt_vocab = Vocabulary.build(self.tgt, min_count)
        return self.src_vocab, self.tgt_vocab

    def feature(self, i: int) -> Optional[np.ndarray]:
        return None if self.features is None else self.features[self.feat_index[i]]

    def subset(self, idx) -> "ParallelCorpus":
        idx = list(idx)
        feats = None if self.features is None else self.features[self.feat_index[idx]]
        meta = {k: np.asarray(v)[idx] for k, v in self.meta.items()}
        return ParallelCorpus([self.src[i] for i in idx], [self.tgt[i] for i in idx], feats,
                              None, meta, self.src_vocab, self.tgt_vocab)


def _read_lines(path) -> list:
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f.read().splitlines()]


def load_corpus(src_path, tgt_path, features_path=None, *, src_vocab: Optional[Vocabulary] = None,
                tgt_vocab: Optional[Vocabulary] = None, min_count: int = 1,
                expect_locations: Optional[int] = None, expect_dim: Optional[int] = None,
                meta_path=None) -> ParallelCorpus:
    """Whitespace-tokenized parallel text (+ optional feature pack, line i -> grid i).

    Vocabularies are built from the data when not supplied; tokens missing from
    a supplied vocabulary map to unk when converted to ids.
    """
    src, tgt = _read_lines(src_path), _read_lines(tgt_path)
    if len(src) != len(tgt):
        raise ValueError(f"line-count mismatch: {src_path} has {len(src)} lines, {tgt_path} has {len(tgt)}")
    feats = None
    if features_path is not None:
        pack = FeaturePack.read(features_path, expect_locations, expect_dim)
        if pack.count != len(src):
            raise ValueError(f"{features_path} holds {pack.count} grids for {len(src)} sentences")
        feats = pack.features
    meta = read_meta(meta_path) if meta_path and os.path.exists(meta_path) else {}
    corpus = ParallelCorpus(src, tgt, feats, None, meta)
    if src_vocab is None or tgt_vocab is None:
        built = corpus.build_vocabs(min_count)
        src_vocab = src_vocab or built[0]
        tgt_vocab = tgt_vocab or built[1]
    corpus.src_vocab, corpus.tgt_vocab = src_vocab, tgt_vocab
    return corpus


def write_corpus(corpus: ParallelCorpus, prefix) -> None:
    """Writes <prefix>.src, .tgt and, when present, .feats and .meta.tsv."""
    for ext, sents in (("src", corpus.src), ("tgt", corpus.tgt)):
        with open(f"{prefix}.{ext}", "w", encoding="utf-8") as f:
            f.writelines(" ".join(s) + "\n" for s in sents)
    if corpus.features is not None:
        FeaturePack(corpus.features[corpus.feat_index]).write(f"{prefix}.feats")
    if corpus.meta:
        write_meta(corpus.meta, f"{prefix}.meta.tsv")


def write_meta(meta: dict, path) -> None:
    keys = sorted(meta)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(keys)
        for row in zip(*(meta[k] for k in keys)):
            w.writerow([int(v) for v in row])


def read_meta(path) -> dict:
    with open(path, encoding="utf-8") as f:
        rows = list(csv.reader(f, delimiter="\t"))
    keys = rows[0]
    cols = list(zip(*rows[1:])) if len(rows) > 1 else [()] * len(keys)
    return {k: np.array([int(v) for v in col], dtype=np.int64) for k, col in zip(keys, cols)}


# ------------------------------------------------------------ synthetic task

OBJ_TOKEN = "OBJ"


@dataclass
class SyntheticSpec:
    grid: int = 4
    img_dim: int = 8
    n_classes: int = 4
    n_words: int = 20
    length: int = 6
    obj_slot: int = 2
    noise_std: float = 0.1
    seed: int = 1234
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200

    def __post_init__(self):
        L = self.grid * self.grid
        if self.n_classes > L:
            raise ValueError(f"n_classes={self.n_classes} exceeds grid cells L={L}")
        if self.n_classes > self.img_dim:
            raise ValueError("orthogonal class signatures need n_classes <= img_dim")
        if not 0 <= self.obj_slot < self.length:
            raise ValueError("obj_slot must index into the sentence")
        if self.n_words < 1 or self.n_classes < 1 or self.grid < 1:
            raise ValueError("n_words, n_classes and grid must be positive")

    @property
    def n_locations(self) -> int:
        return self.grid * self.grid


def class_signatures(spec: SyntheticSpec) -> np.ndarray:
    """K mutually orthogonal unit vectors in R^D (rows)."""
    rng = make_rng(spec.seed)
    q = init_orthogonal((spec.img_dim, spec.img_dim), rng, dtype=np.float64)
    return q[: spec.n_classes]


def gen_synthetic(spec: SyntheticSpec) -> dict:
    """Planted-signal multimodal corpus.

    Source words are uniform draws from ``s0..s{W-1}`` with the token ``OBJ`` at
    ``obj_slot``. Targets translate word by word through a fixed random bijection
    ``s_j -> t_{pi(j)}``, except that ``OBJ`` becomes the class token ``k{c}``.
    The class c is drawn independently of the text; the only evidence for it is
    class c's signature vector, planted in one uniformly chosen grid cell of an
    otherwise noise-only feature grid.
    """
    sig = class_signatures(spec)
    rng = make_rng(spec.seed + 1)
    perm = rng.permutation(spec.n_words)
    L, D = spec.n_locations, spec.img_dim
    splits = {}
    for name, count in (("train", spec.n_train), ("dev", spec.n_dev), ("test", spec.n_test)):
        words = rng.integers(0, spec.n_words, size=(count, spec.length))
        classes = rng.integers(0, spec.n_classes, size=count)
        cells = rng.integers(0, L, size=count)
        feats = rng.standard_normal((count, L, D)) * spec.noise_std
        feats[np.arange(count), cells] = sig[classes]
        src, tgt = [], []
        for i in range(count):
            s = [f"s{w}" for w in words[i]]
            t = [f"t{perm[w]}" for w in words[i]]
            s[spec.obj_slot] = OBJ_TOKEN
            t[spec.obj_slot] = f"k{classes[i]}"
            src.append(s)
            tgt.append(t)
        meta = {"obj_slot": np.full(count, spec.obj_slot), "obj_class": classes, "obj_cell": cells}
        splits[name] = ParallelCorpus(src, tgt, feats.astype(np.float32), None, meta)
    return splits


# ------------------------------------------------------------------ batching

@dataclass
class Batch:
    src: np.ndarray        # (B, M) ids, PAD beyond length
    src_mask: np.ndarray   # (B, M) bool
    tgt: np.ndarray        # (B, N) ids incl. end-of-sentence
    tgt_mask: np.ndarray
    feats: Optional[np.ndarray]
    index: np.ndarray      # corpus rows in this batch

    def __len__(self):
        return self.src.shape[0]

    def tile(self, n: int) -> "Batch":
        """The batch repeated n times (rows grouped by copy)."""
        rep = lambda a: None if a is None else np.concatenate([a] * n, axis=0)  # noqa: E731
        return Batch(rep(self.src), rep(self.src_mask), rep(self.tgt), rep(self.tgt_mask),
                     rep(self.feats), rep(self.index))


def _pad(seqs: Sequence[Sequence[int]]):
    M = max(len(s) for s in seqs)
    ids = np.full((len(seqs), M), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), M), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def make_batch(corpus: ParallelCorpus, idx, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> Batch:
    idx = np.asarray(idx, dtype=np.int64)
    src, src_mask = _pad([src_vocab.encode(corpus.src[i], add_eos=True) for i in idx])
    tgt, tgt_mask = _pad([tgt_vocab.encode(corpus.tgt[i], add_eos=True) for i in idx])
    feats = None if corpus.features is None else corpus.features[corpus.feat_index[idx]]
    return Batch(src, src_mask, tgt, tgt_mask, feats, idx)


def iterate_batches(corpus: ParallelCorpus, batch_size: int, src_vocab: Vocabulary,
                    tgt_vocab: Vocabulary, rng: Optional[np.random.Generator] = None,
                    pool: int = 20):
    """Mini-batches of similar source length.

    With an rng the corpus is shuffled, cut into pools of ``pool`` batches, each
    pool sorted by length (stable) and the resulting batches shuffled. Without an
    rng, batches follow corpus order.
    """
    n = len(corpus)
    if rng is None:
        for start in range(0, n, batch_size):
            yield make_batch(corpus, np.arange(start, min(n, start + batch_size)), src_vocab, tgt_vocab)
        return
    order = rng.permutation(n)
    batches = []
    span = batch_size * pool
    for start in range(0, n, span):
        chunk = order[start: start + span]
        lengths = np.array([len(corpus.src[i]) for i in chunk])
        chunk = chunk[np.argsort(lengths, kind="stable")]
        batches.extend(chunk[i: i + batch_size] for i in range(0, len(chunk), batch_size))
    for j in rng.permutation(len(batches)):
        yield make_batch(corpus, batches[j], src_vocab, tgt_vocab)


# ------------------------------------------------------------ attention dump

def write_pgm(path, pixels: np.ndarray) -> None:
    """Binary 8-bit greyscale PGM."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def attention_image(alpha: np.ndarray, grid: int) -> np.ndarray:
    """round(255 * alpha_i / max alpha) laid out row-major on a grid x grid image."""
    alpha = np.asarray(alpha, dtype=np.float64)
    peak = alpha.max() if alpha.size else 0.0
    scaled = np.zeros_like(alpha) if peak <= 0 else np.round(255.0 * alpha / peak)
    return np.clip(scaled, 0, 255).astype(np.uint8).reshape(grid, grid)


def dump_attention(trace, grid: Optional[int], out_dir, tokens: Optional[Sequence[str]] = None) -> list:
    """Write attention.csv (one row per decode step) and one PGM per step.

    CSV columns: step, token, beta, alpha_0..alpha_{L-1}. PGMs are skipped with
    a warning when L is not grid**2 (or not a perfect square when grid is None).
    Returns the written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = trace.alpha_img
    if not rows:
        raise ValueError("trace has no image attention weights to dump")
    L = len(rows[0])
    if grid is None:
        root = math.isqrt(L)
        grid = root if root * root == L else None
    elif grid * grid != L:
        grid = None
    written = []
    csv_path = os.path.join(out_dir, "attention.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "token", "beta"] + [f"alpha_{i}" for i in range(L)])
        for t, alpha in enumerate(rows):
            tok = tokens[t] if tokens is not None and t < len(tokens) else str(trace.tokens[t])
            beta = f"{trace.beta[t]:.9g}" if trace.beta else ""
            w.writerow([t, tok, beta] + [f"{a:.9g}" for a in alpha])
    written.append(csv_path)
    if grid is None:
        log.warning("attention length %d is not a square grid; writing CSV only", L)
        return written
    for t, alpha in enumerate(rows):
        path = os.path.join(out_dir, f"step_{t:03d}.pgm")
        write_pgm(path, attention_image(alpha, grid))
        written.append(path)
    return written


__all__ = [
    "Batch", "FeaturePack", "OBJ_TOKEN", "ParallelCorpus", "SyntheticSpec", "attention_image",
    "class_signatures", "dump_attention", "gen_synthetic", "iterate_batches", "load_corpus",
    "make_batch", "read_meta", "read_pgm", "write_corpus", "write_meta", "write_pgm",
]
