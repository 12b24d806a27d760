"""Datasets, file formats, and the synthetic shape world."""
from __future__ import annotations

import colorsys
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .boxes import Box, InvalidInputError
from .evaluation import GroundTruthSet
from .pseudo_label import ObjectVocabulary, PseudoBoxLabel, ProposalSet, upsample_activation

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SHAPES = ("circle", "square", "triangle")

# corners of the RGB cube: six hues 60 degrees apart plus white and black
DEFAULT_CATEGORIES = (
    ("red circle", "circle", (255, 0, 0)),
    ("green square", "square", (0, 255, 0)),
    ("blue triangle", "triangle", (0, 0, 255)),
    ("yellow circle", "circle", (255, 255, 0)),
    ("white triangle", "triangle", (255, 255, 255)),
    ("black square", "square", (0, 0, 0)),
    ("cyan square", "square", (0, 255, 255)),
    ("magenta triangle", "triangle", (255, 0, 255)),
)
DEFAULT_NOVEL = ("yellow circle", "magenta triangle")
COLOR_WORDS = {
    (255, 0, 0): "red", (0, 255, 0): "green", (0, 0, 255): "blue",
    (255, 255, 0): "yellow", (0, 255, 255): "cyan", (255, 0, 255): "magenta",
    (255, 255, 255): "white", (0, 0, 0): "black",
}
CAPTION_TEMPLATES = ("{}", "a photo of {}", "there is {} in the picture", "an image showing {}")


class RecordError(InvalidInputError):
    """A single record in a data file could not be read."""

    def __init__(self, message, record_id=None):
        super().__init__(message)
        self.record_id = record_id


@dataclass
class ImageCaptionPair:
    pair_id: str
    image: np.ndarray
    caption: str

    def __post_init__(self):
        if not self.caption:
            raise InvalidInputError(f"pair {self.pair_id}: empty caption")
        arr = np.asarray(self.image)
        if arr.ndim < 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise InvalidInputError(f"pair {self.pair_id}: image has no pixels")


@dataclass
class SynthConfig:
    n_images: int = 200
    image_size: int = 64
    categories: list = field(default_factory=lambda: [list(c) for c in DEFAULT_CATEGORIES])
    objects_per_image: tuple = (1, 3)
    novel: list = field(default_factory=list)
    novel_in_train: bool = True
    test_fraction: float = 0.0
    object_size: int = 14
    slots: int = 3
    position_jitter: int = 0
    scale_jitter: int = 0
    color_jitter: int = 0
    background: int = 128
    background_noise: int = 20
    drop_mentions: float = 0.0
    embedding_dim: int = 8
    seed: int = 0

    def __post_init__(self):
        self.categories = [(str(n), str(s), tuple(int(v) for v in c)) for n, s, c in self.categories]
        names = [c[0] for c in self.categories]
        if len(set(names)) != len(names):
            raise InvalidInputError("category names must be unique")
        for n, s, _ in self.categories:
            if s not in SHAPES:
                raise InvalidInputError(f"category {n}: unknown shape {s!r}")
        self.novel = list(self.novel)
        if not set(self.novel) <= set(names):
            raise InvalidInputError(f"novel categories not registered: {sorted(set(self.novel) - set(names))}")
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise InvalidInputError(f"bad objects_per_image range {self.objects_per_image}")
        if self.n_images < 0:
            raise InvalidInputError("n_images must be nonnegative")
        if not 0.0 <= self.drop_mentions <= 1.0:
            raise InvalidInputError("drop_mentions must lie in [0, 1]")
        if not 0.0 <= self.test_fraction < 1.0:
            raise InvalidInputError("test_fraction must lie in [0, 1)")
        if self.embedding_dim < 3 + len(SHAPES):
            raise InvalidInputError(f"embedding_dim must be at least {3 + len(SHAPES)}")
        if self.object_size % 2 or self.object_size < 2:
            raise InvalidInputError("object_size must be an even integer >= 2")
        # quantization bins in region_merge_proposals are 0.25 wide around each level
        if self.color_jitter >= 64 or self.background_noise >= 64:
            raise InvalidInputError("color_jitter and background_noise must stay below 64")
        _check_palette(self.categories, self.color_jitter)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["categories"] = [[n, s, list(c)] for n, s, c in self.categories]
        d["objects_per_image"] = list(self.objects_per_image)
        return d


def _check_palette(categories, jitter):
    # nearest-canonical-color decoding must stay unambiguous under jitter
    cols = {c for _, _, c in categories}
    arr = np.array(sorted(cols), dtype=float)
    if len(arr) > 1:
        dist = np.abs(arr[:, None, :] - arr[None, :, :]).max(axis=2)
        np.fill_diagonal(dist, np.inf)
        if dist.min() <= 2 * jitter:
            raise InvalidInputError("category colors too close for the configured color jitter")


@dataclass
class SynthObject:
    category: str
    shape: str
    color: tuple
    box: Box


@dataclass
class DatasetManifest:
    pairs: list
    ground_truth: dict  # pair_id -> list[(Box, category)]
    splits: dict  # pair_id -> "train" | "test"
    categories: list
    base: list
    novel: list
    lexicon: dict = field(default_factory=dict)

    def gt_set(self, split: Optional[str] = None, base_only: bool = False) -> GroundTruthSet:
        ids = [p.pair_id for p in self.pairs if split is None or self.splits[p.pair_id] == split]
        anns = {}
        for i in ids:
            anns[i] = [(b, c) for b, c in self.ground_truth[i] if not base_only or c in self.base]
        return GroundTruthSet(anns, base=self.base, novel=[] if base_only else self.novel, images=ids)

    def pairs_in(self, split: str) -> list:
        return [p for p in self.pairs if self.splits[p.pair_id] == split]

    def vocabulary(self) -> ObjectVocabulary:
        return ObjectVocabulary(list(self.categories))


@dataclass
class TextEmbeddingTable:
    categories: list
    C: np.ndarray
    bg: np.ndarray

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=float).reshape(len(self.categories), -1)
        self.bg = np.asarray(self.bg, dtype=float).reshape(-1)
        if self.bg.shape[0] != self.C.shape[1]:
            raise InvalidInputError(f"bg dim {self.bg.shape[0]} != embedding dim {self.C.shape[1]}")
        if len(set(self.categories)) != len(self.categories):
            raise InvalidInputError("duplicate categories in embedding table")

    @property
    def dim(self) -> int:
        return self.C.shape[1]

    def subset(self, names: Sequence[str]) -> "TextEmbeddingTable":
        idx = {c: i for i, c in enumerate(self.categories)}
        missing = [n for n in names if n not in idx]
        if missing:
            raise InvalidInputError(f"categories missing from embedding table: {missing}")
        return TextEmbeddingTable(list(names), self.C[[idx[n] for n in names]], self.bg.copy())

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "categories": list(self.categories), "dim": self.dim,
                "vectors": self.C.tolist(), "bg": self.bg.tolist()}

    @classmethod
    def from_json(cls, d: Mapping) -> "TextEmbeddingTable":
        try:
            cats = list(d["categories"])
            dim = int(d["dim"])
            C = np.asarray(d["vectors"], dtype=float).reshape(len(cats), dim)
            bg = np.asarray(d.get("bg", np.zeros(dim)), dtype=float)
        except (KeyError, ValueError) as exc:
            raise InvalidInputError(f"malformed embedding table ({exc})") from exc
        return cls(cats, C, bg)


def save_embeddings(table: TextEmbeddingTable, path) -> None:
    _write_json(table.to_json(), path)


def load_embeddings(path) -> TextEmbeddingTable:
    with open(path, encoding="utf-8") as f:
        return TextEmbeddingTable.from_json(json.load(f))


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=1, sort_keys=True, ensure_ascii=False)
        f.write("\n")


# -- synthetic shape world --------------------------------------------------------

def attribute_vector(color, shape) -> np.ndarray:
    """[2*rgb - 1 ; shape one-hot], the input of the hidden embedding map."""
    rgb = np.asarray(color, dtype=float) / 255.0
    onehot = np.array([float(shape == s) for s in SHAPES])
    return np.concatenate([2.0 * rgb - 1.0, onehot])


def hidden_embedding_map(dim: int, seed: int) -> np.ndarray:
    """Seeded map with orthonormal columns.

    Being an isometry, it keeps the embedding of a category closer (by dot
    product) to itself than to any other category, whatever the seed.
    """
    n_attr = 3 + len(SHAPES)
    if dim < n_attr:
        raise InvalidInputError(f"embedding_dim must be at least {n_attr}")
    rng = np.random.default_rng([seed, 0xE])
    q, r = np.linalg.qr(rng.standard_normal((dim, n_attr)))
    return q * np.sign(np.diag(r))


def shape_mask(shape: str, x0: int, y0: int, size: int, height: int, width: int) -> np.ndarray:
    """Pixel mask whose tight bounding box is exactly [x0, x0+size) x [y0, y0+size)."""
    ys, xs = np.mgrid[0:height, 0:width]
    cx = x0 + size / 2.0
    cy = y0 + size / 2.0
    inside_box = (xs >= x0) & (xs < x0 + size) & (ys >= y0) & (ys < y0 + size)
    if shape == "square":
        return inside_box
    if shape == "circle":
        r = size / 2.0
        return inside_box & ((xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r - 0.25)
    if shape == "triangle":
        # apex row spans the two center pixels, base row spans the full width
        half = (ys + 1 - y0) * (size / 2.0) / size
        return inside_box & (np.abs(xs + 0.5 - cx) <= half)
    raise InvalidInputError(f"unknown shape {shape!r}")


def caption_for(objects: Sequence[SynthObject], rng: np.random.Generator, drop: float) -> str:
    mentions = []
    for obj in objects:
        if drop > 0 and rng.random() < drop:
            continue
        mentions.append(f"a {obj.category}")
    template = CAPTION_TEMPLATES[int(rng.integers(len(CAPTION_TEMPLATES)))]
    if not mentions:
        return "an image with some shapes"
    return template.format(" and ".join(mentions))


def _render(cfg: SynthConfig, rng: np.random.Generator, allowed: Sequence[int]):
    size = cfg.image_size
    img = np.clip(cfg.background + rng.integers(-cfg.background_noise, cfg.background_noise + 1,
                                                size=(size, size, 3)), 0, 255).astype(np.uint8)
    lo, hi = cfg.objects_per_image
    n = int(rng.integers(lo, hi + 1)) if hi > lo else lo
    slot = size // cfg.slots
    max_obj = cfg.object_size + cfg.scale_jitter
    if n > cfg.slots * cfg.slots or max_obj + 2 * cfg.position_jitter > slot:
        raise InvalidInputError(f"cannot pack {n} objects of size <= {max_obj} into "
                                f"{cfg.slots}x{cfg.slots} slots of {slot}px")
    cells = sorted(int(c) for c in rng.permutation(cfg.slots * cfg.slots)[:n])
    # distinct categories per image while the pool allows, so every mention is unambiguous
    if n <= len(allowed):
        picks = [allowed[int(i)] for i in rng.permutation(len(allowed))[:n]]
    else:
        picks = [allowed[int(i)] for i in rng.integers(len(allowed), size=n)]
    objects = []
    for cell, pick in zip(cells, picks):
        name, shape, color = cfg.categories[pick]
        s = cfg.object_size
        if cfg.scale_jitter:
            s += 2 * int(rng.integers(-cfg.scale_jitter // 2, cfg.scale_jitter // 2 + 1))
        sy, sx = divmod(cell, cfg.slots)
        x0 = sx * slot + (slot - s) // 2
        y0 = sy * slot + (slot - s) // 2
        if cfg.position_jitter:
            x0 += int(rng.integers(-cfg.position_jitter, cfg.position_jitter + 1))
            y0 += int(rng.integers(-cfg.position_jitter, cfg.position_jitter + 1))
        col = np.array(color, dtype=int)
        if cfg.color_jitter:
            col = np.clip(col + rng.integers(-cfg.color_jitter, cfg.color_jitter + 1, size=3), 0, 255)
        mask = shape_mask(shape, x0, y0, s, size, size)
        img[mask] = col.astype(np.uint8)
        objects.append(SynthObject(name, shape, tuple(color), Box(x0, y0, x0 + s, y0 + s)))
    return img, objects


def synth_dataset(cfg: SynthConfig) -> tuple[DatasetManifest, TextEmbeddingTable, np.ndarray]:
    """Render the shape world. Returns (manifest, embedding table, hidden map E)."""
    rng = np.random.default_rng(cfg.seed)
    # captions draw from their own stream: changing drop_mentions leaves the images alone
    caption_rng = np.random.default_rng([cfg.seed, 0xCA])
    names = [c[0] for c in cfg.categories]
    novel_idx = {names.index(n) for n in cfg.novel}
    all_idx = list(range(len(names)))
    base_idx = [i for i in all_idx if i not in novel_idx]
    n_test = int(round(cfg.n_images * cfg.test_fraction))
    pairs, gt, splits = [], {}, {}
    width = max(4, len(str(max(cfg.n_images - 1, 0))))
    for k in range(cfg.n_images):
        split = "test" if k >= cfg.n_images - n_test else "train"
        allowed = all_idx if split == "test" or cfg.novel_in_train else base_idx
        if not allowed:
            raise InvalidInputError("no categories available for training images")
        img, objects = _render(cfg, rng, allowed)
        pid = f"{split}_{k:0{width}d}"
        pairs.append(ImageCaptionPair(pid, img, caption_for(objects, caption_rng, cfg.drop_mentions)))
        gt[pid] = [(o.box, o.category) for o in objects]
        splits[pid] = split
    E = hidden_embedding_map(cfg.embedding_dim, cfg.seed)
    C = np.stack([E @ attribute_vector(c, s) for _, s, c in cfg.categories]) if names else \
        np.zeros((0, cfg.embedding_dim))
    table = TextEmbeddingTable(names, C, np.zeros(cfg.embedding_dim))
    lexicon = {}
    for _, _, c in cfg.categories:
        word = COLOR_WORDS.get(tuple(c))
        if word:
            lexicon[word] = [v / 255.0 for v in c]
    manifest = DatasetManifest(pairs, gt, splits, names, [names[i] for i in base_idx],
                               [names[i] for i in sorted(novel_idx)], lexicon)
    return manifest, table, E


def write_dataset(manifest: DatasetManifest, table: TextEmbeddingTable, out_dir,
                  config: Optional[SynthConfig] = None) -> Path:
    """Write images, pair lists (all and per split), COCO ground truth per split, vocabulary,
    embeddings and the manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for p in manifest.pairs:
        rel = f"images/{p.pair_id}.png"
        save_image(p.image, out / rel)
        records.append({"pair_id": p.pair_id, "image_path": rel, "caption": p.caption})
    save_pairs(records, out / "pairs.jsonl")
    for split in ("train", "test"):
        ids = [p.pair_id for p in manifest.pairs if manifest.splits[p.pair_id] == split]
        save_pairs([r for r in records if manifest.splits[r["pair_id"]] == split],
                   out / f"pairs_{split}.jsonl")
        save_coco(manifest, ids, out / f"gt_{split}.json")
    vocab = manifest.vocabulary()
    with open(out / "vocab.jsonl", "w", encoding="utf-8") as f:
        for rec in vocab.to_records():
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    save_embeddings(table, out / "embeddings.json")
    meta = {"schema_version": SCHEMA_VERSION, "categories": manifest.categories,
            "base": manifest.base, "novel": manifest.novel, "lexicon": manifest.lexicon,
            "splits": {pid: manifest.splits[pid] for pid in sorted(manifest.splits)}}
    if config is not None:
        meta["config"] = config.to_dict()
    _write_json(meta, out / "manifest.json")
    return out


def save_image(image, path) -> None:
    # fixed PNG settings so identical arrays give identical bytes
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG", optimize=False,
                                                            compress_level=6)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_pairs(records: Sequence[Mapping], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps({"schema_version": SCHEMA_VERSION, **rec}, ensure_ascii=False) + "\n")


def load_pairs(path, skip_missing: bool = False) -> Iterator[ImageCaptionPair]:
    """Lazily yield pairs from ``{pair_id, image_path, caption}`` JSON lines.

    Image paths resolve relative to the file's directory. A missing image
    raises :class:`RecordError` carrying the pair id, unless ``skip_missing``.
    """
    path = Path(path)
    root = path.parent
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pid, rel, caption = str(rec["pair_id"]), rec["image_path"], rec["caption"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise RecordError(f"{path}:{lineno}: malformed pair record ({exc})") from exc
            img_path = Path(rel) if Path(rel).is_absolute() else root / rel
            if not img_path.exists():
                if skip_missing:
                    log.warning("pair %s: missing image %s", pid, img_path)
                    continue
                raise RecordError(f"pair {pid}: missing image file {img_path}", pid)
            yield ImageCaptionPair(pid, load_image(img_path), caption)


def save_coco(manifest: DatasetManifest, image_ids: Sequence[str], path) -> None:
    cat_ids = {c: i + 1 for i, c in enumerate(manifest.categories)}
    images, anns = [], []
    by_id = {p.pair_id: p for p in manifest.pairs}
    for n, pid in enumerate(image_ids, 1):
        h, w = np.asarray(by_id[pid].image).shape[:2]
        images.append({"id": n, "file_name": f"images/{pid}.png", "pair_id": pid, "width": w, "height": h})
        for box, cat in manifest.ground_truth[pid]:
            anns.append({"id": len(anns) + 1, "image_id": n, "category_id": cat_ids[cat],
                         "bbox": box.to_xywh(), "area": box.area, "iscrowd": 0})
    cats = [{"id": i, "name": c, "split": "novel" if c in manifest.novel else "base"}
            for c, i in cat_ids.items()]
    _write_json({"images": images, "annotations": anns, "categories": cats}, path)


def load_coco_annotations(path, base: Optional[Sequence[str]] = None,
                          novel: Optional[Sequence[str]] = None) -> GroundTruthSet:
    """COCO subset -> GroundTruthSet keyed by ``pair_id`` (or file stem, or image id).

    Split membership comes from the arguments or from a ``split`` field on each
    category; categories without a split are treated as base.
    """
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    for key in ("images", "annotations", "categories"):
        if key not in data:
            raise InvalidInputError(f"{path}: missing '{key}'")
    cats = {}
    for c in data["categories"]:
        cats[c["id"]] = c["name"]
    keys = {}
    for im in data["images"]:
        if im["id"] in keys:
            raise InvalidInputError(f"{path}: duplicate image id {im['id']}")
        key = im.get("pair_id") or (Path(im["file_name"]).stem if "file_name" in im else str(im["id"]))
        keys[im["id"]] = str(key)
    annotations = {k: [] for k in keys.values()}
    for a in data["annotations"]:
        if a["category_id"] not in cats:
            raise InvalidInputError(f"{path}: annotation {a.get('id')} has dangling category_id "
                                    f"{a['category_id']}")
        if a["image_id"] not in keys:
            raise InvalidInputError(f"{path}: annotation {a.get('id')} refers to unknown image "
                                    f"{a['image_id']}")
        x, y, w, h = a["bbox"]
        annotations[keys[a["image_id"]]].append((Box.from_xywh(x, y, w, h), cats[a["category_id"]]))
    if base is None and novel is None:
        novel = [c["name"] for c in data["categories"] if c.get("split") == "novel"]
        base = [c["name"] for c in data["categories"] if c.get("split") != "novel"]
    return GroundTruthSet(annotations, base=base or [], novel=novel or [],
                          images=list(keys.values()))


def pseudo_label_to_json(lab: PseudoBoxLabel) -> dict:
    return {"schema_version": SCHEMA_VERSION, "pair_id": lab.pair_id, "category": lab.category,
            "box": lab.box.as_list(), "score": lab.score, "token_span": list(lab.token_span)}


def save_pseudo_labels(labels, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for lab in sorted(labels, key=PseudoBoxLabel.sort_key):
            f.write(json.dumps(pseudo_label_to_json(lab), ensure_ascii=False) + "\n")


def load_pseudo_labels(path) -> list[PseudoBoxLabel]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                span = tuple(int(v) for v in r["token_span"])
                if len(span) != 2:
                    raise ValueError("token_span needs two entries")
                out.append(PseudoBoxLabel(str(r["pair_id"]), r["category"], Box.from_list(r["box"]),
                                          float(r["score"]), span))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise RecordError(f"{path}:{lineno}: malformed pseudo label ({exc})") from exc
    return sorted(out, key=PseudoBoxLabel.sort_key)


def pseudo_labels_to_coco(labels, path, image_sizes: Optional[Mapping[str, tuple]] = None) -> None:
    labels = sorted(labels, key=PseudoBoxLabel.sort_key)
    img_ids = {}
    for lab in labels:
        img_ids.setdefault(lab.pair_id, len(img_ids) + 1)
    cat_ids = {}
    for c in sorted({lab.category for lab in labels}):
        cat_ids[c] = len(cat_ids) + 1
    images = []
    for pid, i in img_ids.items():
        rec = {"id": i, "pair_id": pid, "file_name": f"{pid}.png"}
        if image_sizes and pid in image_sizes:
            rec["height"], rec["width"] = image_sizes[pid]
        images.append(rec)
    anns = [{"id": n, "image_id": img_ids[lab.pair_id], "category_id": cat_ids[lab.category],
             "bbox": lab.box.to_xywh(), "area": lab.box.area, "score": lab.score, "iscrowd": 0}
            for n, lab in enumerate(labels, 1)]
    _write_json({"images": images, "annotations": anns,
                 "categories": [{"id": i, "name": c} for c, i in cat_ids.items()]}, path)


# -- visualization ----------------------------------------------------------------

def heat_color(v: float) -> tuple:
    """Red (low) to yellow (high) ramp for v in [0, 1]."""
    r, g, b = colorsys.hsv_to_rgb(v / 6.0, 1.0, 1.0)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def half_max_blocks(phi_grid: np.ndarray) -> np.ndarray:
    """Normalize by the max and zero out cells below half of it."""
    g = np.asarray(phi_grid, dtype=float)
    m = g.max() if g.size else 0.0
    if m <= 0:
        return np.zeros_like(g)
    n = g / m
    n[n < 0.5] = 0.0
    return n


def overlay_array(image, phi_grid, proposals: Optional[ProposalSet] = None,
                  selected: Optional[Box] = None) -> np.ndarray:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    img = img[:, :, :3].astype(float)
    h, w = img.shape[:2]
    norm = half_max_blocks(phi_grid)
    # block rendering: each grid cell becomes a constant rectangle
    gy = np.minimum((np.arange(h) * norm.shape[0]) // h, norm.shape[0] - 1)
    gx = np.minimum((np.arange(w) * norm.shape[1]) // w, norm.shape[1] - 1)
    alpha = norm[gy][:, gx]
    colors = np.zeros((h, w, 3))
    for v in np.unique(alpha[alpha > 0]):
        colors[alpha == v] = heat_color(float(v))
    out = img * (1 - alpha[..., None]) + colors * alpha[..., None]
    pil = Image.fromarray(np.clip(np.rint(out), 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(pil)
    if proposals is not None:
        for b in proposals.boxes:
            draw.rectangle([b.x_min, b.y_min, b.x_max - 1, b.y_max - 1], outline=(0, 0, 0))
    if selected is not None:
        draw.rectangle([selected.x_min, selected.y_min, selected.x_max - 1, selected.y_max - 1],
                       outline=(255, 0, 0))
    return np.asarray(pil)


def export_overlay(image, activation, proposals, selected, path) -> Path:
    """Write the half-max thresholded heatmap with proposals (black) and the pick (red)."""
    phi = activation.as_grid() if hasattr(activation, "as_grid") else np.asarray(activation)
    arr = overlay_array(image, phi, proposals, selected)
    path = Path(path)
    save_image(arr, path)
    return path


def pixel_map(activation, size) -> np.ndarray:
    phi = activation.as_grid() if hasattr(activation, "as_grid") else np.asarray(activation)
    return upsample_activation(phi, size)
