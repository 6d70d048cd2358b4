"""Synthetic paired data standing in for frozen backbones and a caption corpus.

Every sample is an instance of a *concept*: a small set of vocabulary tokens
with positive weights. Frozen random linear maps play the part of the two
pretrained feature extractors: the text side sees the whole concept mapped
into ``d_txt`` dims; the image side is a ``g x g`` patch grid where each
concept token is painted onto one or more patches, so the full concept is
only recoverable by pooling over patches.

Generation is a pure function of ``(config, seed)``; per-sample generators are
seeded from ``(seed, stream, sample index)`` so the output never depends on
iteration order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from lexalign.errors import ValidationError
from lexalign.lexcore import SparseLexical, Vocabulary

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")

# seed streams
_CONCEPTS, _PAIRS, _MAPS, _SCENES = 11, 12, 13, 14


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 256
    d_img: int = 64
    d_txt: int = 64
    grid: int = 4
    n_train: int = 4096
    n_val: int = 128
    n_test: int = 256
    max_active: int = 4
    noise_sigma: float = 0.05
    n_scenes: int = 32
    scene_classes: int = 5
    scene_grid: int = 8
    scene_separation: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValidationError(f"vocab_size: must be >= 2, got {self.vocab_size}")
        for name in ("d_img", "d_txt", "grid", "max_active", "scene_classes", "scene_grid"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("n_train", "n_val", "n_test", "n_scenes"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name}: must be non-negative")
        if self.n_train < 2 or self.n_test < 2:
            raise ValidationError("n_train/n_test: need at least 2 pairs each")
        if self.max_active >= self.vocab_size:
            raise ValidationError("max_active: must be smaller than vocab_size")
        if self.grid * self.grid < self.max_active:
            raise ValidationError("grid: needs at least max_active patches")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma: must be non-negative")
        if self.scene_classes < 2 or self.scene_classes > self.vocab_size:
            raise ValidationError("scene_classes: must lie in [2, vocab_size]")
        if self.scene_grid**2 < self.scene_classes:
            raise ValidationError("scene_grid: grid must have at least scene_classes patches")

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_concepts(self) -> int:
        return self.n_train + self.n_val + self.n_test


@dataclass(frozen=True)
class Concept:
    id: int
    lexical: SparseLexical


@dataclass
class PairedSample:
    concept_id: int
    txt_features: np.ndarray  # 1 x d_txt
    img_features: np.ndarray  # n x d_img
    ownership: np.ndarray  # per patch token id, -1 for background


@dataclass
class ModalityMaps:
    txt: np.ndarray  # d_txt x V
    img: np.ndarray  # d_img x V


@dataclass
class PatchScene:
    grid: int
    labels: np.ndarray  # g*g class ids, row-major
    features: np.ndarray  # g*g x d
    class_tokens: np.ndarray  # C token ids
    metadata: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.class_tokens)


def support_capacity(vocab_size: int, max_active: int) -> int:
    return sum(math.comb(vocab_size, k) for k in range(1, max_active + 1))


def gen_concepts(vocab_size: int, n_concepts: int, max_active: int, seed) -> list[Concept]:
    """Concepts with pairwise-distinct supports of size 1..max_active."""
    if not 1 <= max_active < vocab_size:
        raise ValidationError("max_active must lie in [1, vocab_size)")
    if n_concepts > support_capacity(vocab_size, max_active):
        raise ValidationError(
            f"{n_concepts} concepts exceed the {support_capacity(vocab_size, max_active)} distinct supports available"
        )
    rng = np.random.default_rng(_seed_seq(seed, _CONCEPTS))
    seen = set()
    concepts = []
    while len(concepts) < n_concepts:
        size = int(rng.integers(1, max_active + 1))
        ids = np.sort(rng.choice(vocab_size, size=size, replace=False))
        key = tuple(ids.tolist())
        weights = rng.uniform(0.5, 1.5, size=size)
        if key in seen:
            continue
        seen.add(key)
        weights /= np.linalg.norm(weights)
        concepts.append(Concept(len(concepts), SparseLexical(ids, weights, vocab_size)))
    return concepts


def _seed_seq(seed, *stream) -> list[int]:
    base = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    return base + [int(s) for s in stream]


def make_modality_maps(vocab_size: int, d_txt: int, d_img: int, seed) -> ModalityMaps:
    """Fixed Gaussian maps with roughly unit-norm columns."""
    rng = np.random.default_rng(_seed_seq(seed, _MAPS))
    maps = ModalityMaps(
        txt=rng.normal(0.0, 1.0 / math.sqrt(d_txt), size=(d_txt, vocab_size)),
        img=rng.normal(0.0, 1.0 / math.sqrt(d_img), size=(d_img, vocab_size)),
    )
    check_maps(maps)
    return maps


def check_maps(maps: ModalityMaps) -> None:
    for name in ("txt", "img"):
        m = getattr(maps, name)
        if np.linalg.matrix_rank(m) < min(m.shape):
            raise ValidationError(f"{name} map is rank deficient")
        if np.any(np.linalg.norm(m, axis=0) == 0):
            raise ValidationError(f"{name} map has a zero column")


def gen_pair(concept: Concept, noise_sigma: float, maps: ModalityMaps, grid: int, seed,
             checked: bool = False) -> PairedSample:
    if not checked:
        check_maps(maps)
    rng = np.random.default_rng(_seed_seq(seed, _PAIRS, concept.id))
    lex = concept.lexical
    n_patches = grid * grid
    k = lex.nnz
    if k > n_patches:
        raise ValidationError(f"concept with {k} tokens does not fit on {n_patches} patches")
    dense = lex.densify()

    txt = (maps.txt @ dense)[None, :] + rng.normal(0.0, noise_sigma, size=(1, maps.txt.shape[0]))

    n_owned = int(rng.integers(k, max(k, n_patches // 2) + 1))
    owned = rng.choice(n_patches, size=n_owned, replace=False)
    ownership = np.full(n_patches, -1, dtype=np.int64)
    ownership[owned] = lex.ids[np.arange(n_owned) % k]
    signal = np.zeros((n_patches, maps.img.shape[0]))
    for patch in owned:
        tok = ownership[patch]
        signal[patch] = dense[tok] * maps.img[:, tok]
    img = signal + rng.normal(0.0, noise_sigma, size=signal.shape)
    return PairedSample(concept.id, txt, img, ownership)


def scene_labels(n_classes: int, grid: int) -> np.ndarray:
    """Row-major class labels: column-major order split into equal contiguous runs."""
    if n_classes < 2 or grid * grid < n_classes:
        raise ValidationError("need 2 <= classes <= grid*grid")
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    column_major = cols * grid + rows
    return (column_major * n_classes) // (grid * grid)


def gen_patch_scene(n_classes: int, grid: int, separation: float, seed, img_map: np.ndarray | None = None,
                    class_tokens=None, noise_sigma: float = 0.05, dim: int = 16) -> PatchScene:
    """A g x g scene of class regions.

    With ``img_map`` each class centre is the mapped column of its class token
    (so a model trained on the paired data can read it); without it, centres
    are random and scaled so their minimum pairwise distance equals
    ``separation``.
    """
    labels = scene_labels(n_classes, grid)
    if separation < 0:
        raise ValidationError("separation must be non-negative")
    rng = np.random.default_rng(_seed_seq(seed, _SCENES))
    if img_map is not None:
        vocab_size = img_map.shape[1]
        if class_tokens is None:
            class_tokens = rng.choice(vocab_size, size=n_classes, replace=False)
        class_tokens = np.asarray(class_tokens, dtype=np.int64)
        if len(class_tokens) != n_classes or len(set(class_tokens.tolist())) != n_classes:
            raise ValidationError("need one distinct class token per class")
        if class_tokens.min() < 0 or class_tokens.max() >= vocab_size:
            raise ValidationError("class token out of vocabulary range")
        centers = img_map[:, class_tokens].T
        min_dist = _min_pairwise(centers)
        if min_dist < separation:
            raise ValidationError(
                f"class centres are only {min_dist:.3f} apart, below separation {separation}"
            )
    else:
        class_tokens = np.arange(n_classes) if class_tokens is None else np.asarray(class_tokens, dtype=np.int64)
        raw = rng.normal(size=(n_classes, dim))
        centers = raw * (separation / _min_pairwise(raw))
        min_dist = _min_pairwise(centers)
    features = centers[labels] + rng.normal(0.0, noise_sigma, size=(grid * grid, centers.shape[1]))
    meta = {"min_center_distance": float(min_dist), "degenerate": bool(separation == 0 or min_dist == 0)}
    return PatchScene(grid, labels, features, class_tokens, meta)


def _min_pairwise(x: np.ndarray) -> float:
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt((diff**2).sum(axis=-1))
    return float(d[np.triu_indices(len(x), k=1)].min())


# -- dataset container -----------------------------------------------------


@dataclass
class Split:
    name: str
    concept_ids: np.ndarray
    txt: np.ndarray  # N x d_txt
    img: np.ndarray  # N x n x d_img
    ownership: np.ndarray  # N x n
    lexical: list[SparseLexical]

    def __len__(self):
        return len(self.concept_ids)

    def true_dense(self) -> np.ndarray:
        return np.stack([s.densify() for s in self.lexical]) if self.lexical else np.zeros((0, 0))


@dataclass
class Dataset:
    config: SynthConfig
    vocab: Vocabulary
    maps: ModalityMaps
    splits: dict[str, Split]
    scenes: list[PatchScene]
    manifest: dict = field(default_factory=dict)

    @property
    def dataset_hash(self) -> str:
        return self.manifest.get("dataset_hash") or config_hash(self.config)

    def __getitem__(self, split: str) -> Split:
        try:
            return self.splits[split]
        except KeyError:
            raise ValidationError(f"unknown split {split!r}") from None


def config_hash(config) -> str:
    payload = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def build_dataset(config: SynthConfig, vocab: Vocabulary | None = None) -> Dataset:
    vocab = vocab or Vocabulary.synthetic(config.vocab_size)
    if vocab.size != config.vocab_size:
        raise ValidationError(f"vocab_size: config says {config.vocab_size}, vocabulary has {vocab.size}")
    seed = config.seed
    maps = make_modality_maps(config.vocab_size, config.d_txt, config.d_img, seed)
    concepts = gen_concepts(config.vocab_size, config.n_concepts, config.max_active, seed)
    bounds = np.cumsum([0, config.n_train, config.n_val, config.n_test])
    splits = {}
    for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
        pairs = [gen_pair(c, config.noise_sigma, maps, config.grid, seed, checked=True) for c in concepts[lo:hi]]
        splits[name] = _stack_split(name, pairs, [c.lexical for c in concepts[lo:hi]], config, maps)
    scenes = [
        gen_patch_scene(config.scene_classes, config.scene_grid, config.scene_separation, [seed, i],
                        img_map=maps.img, noise_sigma=config.noise_sigma)
        for i in range(config.n_scenes)
    ]
    return Dataset(config, vocab, maps, splits, scenes, {"dataset_hash": config_hash(config)})


def _stack_split(name, pairs, lexical, config, maps) -> Split:
    n = len(pairs)
    return Split(
        name,
        np.array([p.concept_id for p in pairs], dtype=np.int64),
        np.concatenate([p.txt_features for p in pairs]) if n else np.zeros((0, config.d_txt)),
        np.stack([p.img_features for p in pairs]) if n else np.zeros((0, config.n_patches, config.d_img)),
        np.stack([p.ownership for p in pairs]) if n else np.zeros((0, config.n_patches), dtype=np.int64),
        lexical,
    )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(dataset: Dataset, out_dir) -> dict:
    """Write JSONL splits, scenes, maps, vocabulary and a manifest; return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset.vocab.to_file(out / "vocab.txt")
    with open(out / "maps.json", "w", encoding="utf-8") as fh:
        json.dump({"txt": dataset.maps.txt.tolist(), "img": dataset.maps.img.tolist()}, fh)
        fh.write("\n")
    boundaries = {}
    for name, split in dataset.splits.items():
        with open(out / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            for i in range(len(split)):
                fh.write(json.dumps({
                    "id": int(split.concept_ids[i]),
                    "split": name,
                    "concept": [[t, v] for t, v in split.lexical[i].entries],
                    "txt": split.txt[i].tolist(),
                    "img": split.img[i].tolist(),
                    "owner": split.ownership[i].tolist(),
                }) + "\n")
        ids = split.concept_ids
        boundaries[name] = [int(ids[0]), int(ids[-1]) + 1] if len(ids) else [0, 0]
    with open(out / "scenes.jsonl", "w", encoding="utf-8") as fh:
        for i, scene in enumerate(dataset.scenes):
            fh.write(json.dumps({
                "id": i,
                "grid": scene.grid,
                "labels": scene.labels.tolist(),
                "class_tokens": scene.class_tokens.tolist(),
                "features": scene.features.tolist(),
                "metadata": scene.metadata,
            }) + "\n")
    files = ["vocab.txt", "maps.json", *(f"{s}.jsonl" for s in dataset.splits), "scenes.jsonl"]
    file_hashes = {f: _sha256(out / f) for f in files}
    digest = hashlib.sha256(json.dumps([asdict(dataset.config), file_hashes], sort_keys=True).encode())
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(dataset.config),
        "seed": dataset.config.seed,
        "splits": boundaries,
        "files": file_hashes,
        "dataset_hash": digest.hexdigest()[:16],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    dataset.manifest = manifest
    return manifest


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise ValidationError(f"no manifest.json in {data_dir}")
    return json.loads(path.read_text(encoding="utf-8"))


def load_dataset(data_dir, splits=SPLITS, verify: bool = True) -> Dataset:
    """Read a dataset directory written by :func:`write_dataset`."""
    root = Path(data_dir)
    manifest = read_manifest(root)
    if verify:
        for name, digest in manifest["files"].items():
            if _sha256(root / name) != digest:
                raise ValidationError(f"{name} does not match its manifest hash")
    known = {f.name for f in fields(SynthConfig)}
    config = SynthConfig(**{k: v for k, v in manifest["config"].items() if k in known})
    vocab = Vocabulary.from_file(root / "vocab.txt")
    raw = json.loads((root / "maps.json").read_text(encoding="utf-8"))
    maps = ModalityMaps(np.asarray(raw["txt"]), np.asarray(raw["img"]))
    loaded = {}
    for name in splits:
        rows = [json.loads(line) for line in (root / f"{name}.jsonl").read_text(encoding="utf-8").splitlines()]
        pairs = [
            PairedSample(r["id"], np.asarray(r["txt"])[None, :], np.asarray(r["img"]), np.asarray(r["owner"]))
            for r in rows
        ]
        lexical = [SparseLexical.from_entries(r["concept"], config.vocab_size) for r in rows]
        loaded[name] = _stack_split(name, pairs, lexical, config, maps)
    scenes = []
    for line in (root / "scenes.jsonl").read_text(encoding="utf-8").splitlines():
        r = json.loads(line)
        scenes.append(PatchScene(r["grid"], np.asarray(r["labels"], dtype=np.int64), np.asarray(r["features"]),
                                 np.asarray(r["class_tokens"], dtype=np.int64), r["metadata"]))
    return Dataset(config, vocab, maps, loaded, scenes, manifest)
