"""Caption vocabulary matching, proposals, and activation-guided box selection."""
from __future__ import annotations

import json
import logging
import re
import unicodedata
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .boxes import Box, InvalidInputError
from .vlm_core import (CLS, SEP, SPECIAL_TOKENS, ImportedPair, ToyVLM, as_float_image,
                       grad_cam, index_imported_dir, load_imported_pair)

log = logging.getLogger(__name__)

_PUNCT = re.compile(r"[^\w\s-]|_", re.UNICODE)


def normalize_text(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    text = unicodedata.normalize("NFC", text).lower()
    text = _PUNCT.sub(" ", text).replace("-", " ")
    return text.split()


def normalize_tokens(tokens: Iterable[str]) -> list[str]:
    out = []
    for tok in tokens:
        out.extend(normalize_text(tok))
    return out


# -- vocabulary ----------------------------------------------------------------

@dataclass
class ObjectVocabulary:
    categories: list
    aliases: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for name in self.categories:
            key = " ".join(normalize_text(name))
            if not key:
                raise InvalidInputError(f"category {name!r} normalizes to nothing")
            if key in seen:
                raise InvalidInputError(f"duplicate category after normalization: {name!r}")
            seen.add(key)
        aliases = {}
        for name in self.categories:
            forms = list(self.aliases.get(name, []))
            if name not in forms:
                forms.insert(0, name)
            aliases[name] = forms
        self.aliases = aliases
        self._build_index()

    def _build_index(self):
        # alias token tuple -> category; first registration wins
        self._index: dict[tuple, str] = {}
        for name in self.categories:
            for form in self.aliases[name]:
                key = tuple(normalize_text(form))
                if key:
                    self._index.setdefault(key, name)
        self._words = {w for key in self._index for w in key}
        self._max_len = max((len(k) for k in self._index), default=0)

    def canonical_word(self, word: str) -> str:
        """Singularize a trailing plural against the alias words."""
        if word in self._words:
            return word
        for suffix in ("es", "s"):
            if word.endswith(suffix) and word[: -len(suffix)] in self._words:
                return word[: -len(suffix)]
        return word

    def lookup(self, words: Sequence[str]) -> Optional[str]:
        return self._index.get(tuple(self.canonical_word(w) for w in words))

    def restricted(self, names: Iterable[str]) -> "ObjectVocabulary":
        wanted = set(names)
        keep = [c for c in self.categories if c in wanted]
        return ObjectVocabulary(keep, {c: self.aliases[c] for c in keep})

    def __len__(self):
        return len(self.categories)

    def to_records(self) -> list[dict]:
        return [{"name": c, "aliases": list(self.aliases[c])} for c in self.categories]


def load_vocabulary(path) -> ObjectVocabulary:
    """Read ``{name, aliases[]}`` records, one JSON object per line (a JSON array also works)."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.strip()
    records = []
    if stripped.startswith("["):
        records = json.loads(stripped)
    else:
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{path}:{lineno}: {exc}") from exc
    cats, aliases = [], {}
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or "name" not in rec:
            raise InvalidInputError(f"{path}: record {i} lacks a name")
        cats.append(rec["name"])
        aliases[rec["name"]] = list(rec.get("aliases", []))
    return ObjectVocabulary(cats, aliases)


def save_vocabulary(vocab: ObjectVocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in vocab.to_records():
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class VocabularyMatch:
    category: str
    token_span: tuple  # [start, end) over caption words


def match_vocabulary(tokens: Sequence[str], vocab: ObjectVocabulary) -> list[VocabularyMatch]:
    """Greedy longest-span matching, left to right; every mention yields one match."""
    words = list(tokens)
    out = []
    i = 0
    while i < len(words):
        for j in range(min(len(words), i + vocab._max_len), i, -1):
            cat = vocab.lookup(words[i:j])
            if cat is not None:
                out.append(VocabularyMatch(cat, (i, j)))
                i = j
                break
        else:
            i += 1
    return out


# -- activation maps at pixel resolution ------------------------------------------

def _interp_axis(n_out: int, n_in: int):
    # cell-center aligned sampling positions, clamped at the borders
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def upsample_activation(phi_grid: np.ndarray, size) -> np.ndarray:
    """Bilinear upsampling of an (H_g, W_g) map to (height, width) pixels."""
    g = np.asarray(phi_grid, dtype=float)
    if g.ndim != 2:
        raise InvalidInputError(f"expected a 2-D grid, got shape {g.shape}")
    height, width = size
    y0, y1, wy = _interp_axis(height, g.shape[0])
    x0, x1, wx = _interp_axis(width, g.shape[1])
    top = g[y0][:, x0] * (1 - wx) + g[y0][:, x1] * wx
    bot = g[y1][:, x0] * (1 - wx) + g[y1][:, x1] * wx
    out = top * (1 - wy)[:, None] + bot * wy[:, None]
    return np.maximum(out, 0.0)


def _integral(phi: np.ndarray) -> np.ndarray:
    ii = np.zeros((phi.shape[0] + 1, phi.shape[1] + 1))
    ii[1:, 1:] = np.cumsum(np.cumsum(phi, axis=0), axis=1)
    return ii


def _pixel_bounds(b: Box, shape) -> tuple[int, int, int, int]:
    coords = (b.x_min, b.y_min, b.x_max, b.y_max)
    ints = tuple(int(round(c)) for c in coords)
    x0, y0, x1, y1 = ints
    if x1 <= x0 or y1 <= y0:
        raise InvalidInputError(f"box {b} has zero pixel area")
    if x0 < 0 or y0 < 0 or x1 > shape[1] or y1 > shape[0]:
        raise InvalidInputError(f"box {b} outside map of shape {shape}")
    return x0, y0, x1, y1


def score_proposal(phi: np.ndarray, b: Box) -> float:
    """Activation mass inside the box divided by sqrt(box area)."""
    x0, y0, x1, y1 = _pixel_bounds(b, phi.shape)
    return float(phi[y0:y1, x0:x1].sum() / np.sqrt((x1 - x0) * (y1 - y0)))


def score_proposals(phi: np.ndarray, boxes: Sequence[Box]) -> np.ndarray:
    ii = _integral(np.asarray(phi, dtype=float))
    b = np.array([_pixel_bounds(bx, phi.shape) for bx in boxes], dtype=int).reshape(-1, 4)
    x0, y0, x1, y1 = b.T
    mass = ii[y1, x1] - ii[y0, x1] - ii[y1, x0] + ii[y0, x0]
    return mass / np.sqrt((x1 - x0) * (y1 - y0))


@dataclass
class ProposalSet:
    boxes: list
    source: str = "loaded"

    def __len__(self):
        return len(self.boxes)


def select_box(phi: np.ndarray, proposals) -> tuple[Box, float]:
    """Best proposal under :func:`score_proposal`; ties go to the lowest index."""
    boxes = proposals.boxes if isinstance(proposals, ProposalSet) else list(proposals)
    if not boxes:
        raise InvalidInputError("empty proposal set")
    scores = score_proposals(phi, boxes)
    i = int(np.argmax(scores))
    return boxes[i], float(scores[i])


# -- proposal generators ---------------------------------------------------------

def _window_starts(extent: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return starts


def grid_proposals(size, scales: Sequence[float], ratios: Sequence[float] = (1.0,),
                   stride: Optional[int] = None) -> ProposalSet:
    """Sliding windows for every scale/aspect ratio.

    A window of scale s and ratio r is round(s*sqrt(r)) wide and round(s/sqrt(r))
    tall, clipped to the image. Windows start every ``stride`` pixels and one
    extra window sits flush with the far edge when the stride does not land there.
    """
    if not scales or not ratios:
        raise InvalidInputError("scales and ratios must be nonempty")
    height, width = size
    stride = stride or max(1, int(min(scales)) // 2)
    shapes = []
    for s in scales:
        for r in ratios:
            w = min(width, max(1, int(round(s * np.sqrt(r)))))
            h = min(height, max(1, int(round(s / np.sqrt(r)))))
            if (w, h) not in shapes:
                shapes.append((w, h))
    boxes = []
    for w, h in shapes:
        for y in _window_starts(height, h, stride):
            for x in _window_starts(width, w, stride):
                boxes.append(Box(x, y, x + w, y + h))
    return ProposalSet(boxes, "grid")


def quantize_colors(image, levels: int = 3) -> np.ndarray:
    """Per-channel uniform quantization to ``levels`` values; returns an integer label map."""
    img = as_float_image(image)
    q = np.clip(np.rint(img * (levels - 1)), 0, levels - 1).astype(int)
    return (q[..., 0] * levels + q[..., 1]) * levels + q[..., 2]


def region_merge_proposals(image, levels: int = 3, min_size: int = 4,
                           merge_gap: int = 4) -> ProposalSet:
    """Connected components of quantized color plus unions of nearby component pairs."""
    labels = quantize_colors(image, levels)
    height, width = labels.shape
    comps = []  # (mask, box)
    for value in np.unique(labels):
        lab, n = ndimage.label(labels == value)
        slices = ndimage.find_objects(lab)
        for k, sl in enumerate(slices, 1):
            if sl is None:
                continue
            if np.count_nonzero(lab[sl] == k) < min_size:
                continue
            ys, xs = sl
            comps.append((k, lab, sl, Box(xs.start, ys.start, xs.stop, ys.stop)))
    boxes = []
    seen = set()

    def add(b):
        key = tuple(b.as_list())
        if key not in seen:
            seen.add(key)
            boxes.append(b)

    for *_, b in comps:
        add(b)
    if merge_gap > 0 and len(comps) > 1:
        st = np.ones((2 * merge_gap + 1, 2 * merge_gap + 1), dtype=bool)
        grown = []
        for k, lab, sl, b in comps:
            m = np.zeros((height, width), dtype=bool)
            m[sl] = lab[sl] == k
            grown.append((m, ndimage.binary_dilation(m, structure=st)))
        for i in range(len(comps)):
            for j in range(i + 1, len(comps)):
                if np.any(grown[i][1] & grown[j][0]):
                    bi, bj = comps[i][3], comps[j][3]
                    add(Box(min(bi.x_min, bj.x_min), min(bi.y_min, bj.y_min),
                            max(bi.x_max, bj.x_max), max(bi.y_max, bj.y_max)))
    if not boxes:
        boxes.append(Box(0, 0, width, height))
    return ProposalSet(boxes, "region-merge")


PROPOSAL_SCHEMA_VERSION = 1


def save_proposals(table: Mapping[str, ProposalSet], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for image_id, ps in table.items():
            f.write(json.dumps({"schema_version": PROPOSAL_SCHEMA_VERSION, "image_id": image_id,
                                "boxes": [b.as_list() for b in ps.boxes]}) + "\n")


def load_proposals(path) -> dict[str, ProposalSet]:
    table: dict[str, ProposalSet] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                table[str(rec["image_id"])] = ProposalSet(
                    [Box.from_list(b) for b in rec["boxes"]], "loaded")
            except (json.JSONDecodeError, KeyError, TypeError, InvalidInputError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: malformed proposal record ({exc})") from exc
    return table


class ProposalSource:
    """Picklable proposal provider built from a ``grid``, ``region-merge`` or ``file:PATH`` spec.

    Calling it with a pair returns a :class:`ProposalSet`; :meth:`boxes` serves
    the detector, which asks by image id and pixel array.
    """

    KINDS = ("grid", "region-merge")

    def __init__(self, spec: str = "region-merge"):
        self.spec = spec
        self.table: Optional[dict[str, ProposalSet]] = None
        if spec.startswith("file:"):
            path = spec[len("file:"):]
            if not path:
                raise InvalidInputError("proposal spec 'file:' needs a path")
            self.table = load_proposals(path)
        elif spec not in self.KINDS:
            raise InvalidInputError(f"unknown proposal source {spec!r}; "
                                    f"expected grid, region-merge or file:PATH")

    def for_image(self, image_id: str, image) -> ProposalSet:
        if self.table is not None:
            if str(image_id) not in self.table:
                raise InvalidInputError(f"no stored proposals for image {image_id}")
            return self.table[str(image_id)]
        if self.spec == "grid":
            h, w = image_size(image)
            side = min(h, w)
            scales = sorted({max(2, int(round(f * side))) for f in (0.1875, 0.25, 0.375, 0.5, 0.75, 1.0)})
            return grid_proposals((h, w), scales, (0.5, 1.0, 2.0), stride=max(1, side // 16))
        return region_merge_proposals(image)

    def __call__(self, pair) -> ProposalSet:
        return self.for_image(pair.pair_id, pair.image)

    def boxes(self, image_id: str, image) -> list[Box]:
        return list(self.for_image(image_id, image).boxes)


# -- end-to-end generation --------------------------------------------------------

@dataclass(frozen=True)
class PseudoBoxLabel:
    pair_id: str
    category: str
    box: Box
    score: float
    token_span: tuple

    def sort_key(self):
        return (self.pair_id, tuple(self.token_span))


class ActivationSource(Protocol):
    def token_maps(self, pair) -> tuple[list[str], np.ndarray]:
        """Caption words and one (H_g, W_g) activation map per word."""


class ToyActivationSource:
    """Grad-CAM maps from a :class:`ToyVLM` over ``[CLS] words [SEP]``."""

    def __init__(self, model: ToyVLM, lexicon: Optional[Mapping[str, Sequence[float]]] = None):
        self.model = model
        self.lexicon = dict(lexicon or {})

    def token_maps(self, pair):
        words = normalize_text(pair.caption)
        tokens = [CLS] + words + [SEP]
        text = self.model.encode_text(tokens, self.lexicon)
        visual = self.model.encode_image(pair.image)
        maps = self.model.activation_maps(text, visual, range(1, len(words) + 1))
        grid = visual.grid
        stack = np.stack([m.phi.reshape(grid) for m in maps]) if maps else np.zeros((0,) + tuple(grid))
        return words, stack


class ImportedActivationSource:
    """Grad-CAM maps from exported per-pair tensors (see :class:`ImportedPair`)."""

    def __init__(self, directory, layer: Optional[int] = 8):
        self.directory = Path(directory)
        self.index = index_imported_dir(self.directory)
        self.layer = layer

    def token_maps(self, pair):
        path = self.index.get(str(pair.pair_id))
        if path is None:
            raise InvalidInputError(f"no exported tensors for pair {pair.pair_id}")
        rec: ImportedPair = load_imported_pair(path)
        layer = self.layer if self.layer in rec.layers else max(rec.layers)
        record, grads = rec.record(layer)
        keep = [i for i, t in enumerate(rec.tokens) if t not in SPECIAL_TOKENS]
        words = [rec.tokens[i].lower() for i in keep]
        maps = [grad_cam(record, grads, i, rec.grid).phi.reshape(rec.grid) for i in keep]
        stack = np.stack(maps) if maps else np.zeros((0,) + tuple(rec.grid))
        return words, stack


ProposalProvider = Callable[[object], ProposalSet]


def image_size(image) -> tuple[int, int]:
    arr = np.asarray(image)
    return int(arr.shape[0]), int(arr.shape[1])


def generate_pseudo_labels(pair, vocab: ObjectVocabulary, source: ActivationSource,
                           proposals: ProposalProvider) -> list[PseudoBoxLabel]:
    """One pseudo box per vocabulary mention; repeated (category, box) pairs collapse."""
    words, maps = source.token_maps(pair)
    matches = match_vocabulary(words, vocab)
    if not matches:
        return []
    props = proposals(pair)
    if len(props) == 0:
        raise InvalidInputError(f"pair {pair.pair_id}: empty proposal set")
    size = image_size(pair.image)
    out = []
    seen = set()
    for m in matches:
        a, b = m.token_span
        phi = upsample_activation(maps[a:b].mean(axis=0), size)
        box, score = select_box(phi, props)
        key = (m.category, box)
        if key in seen:
            continue
        seen.add(key)
        out.append(PseudoBoxLabel(str(pair.pair_id), m.category, box, score, tuple(m.token_span)))
    return out


def _label_one(pair, vocab, source, proposals):
    try:
        return generate_pseudo_labels(pair, vocab, source, proposals), None
    except Exception as exc:  # per-pair isolation
        return [], f"{exc}"


def generate_for_pairs(pairs: Iterable, vocab: ObjectVocabulary, source: ActivationSource,
                       proposals: ProposalProvider, stats: Optional[dict] = None,
                       workers: int = 1) -> list[PseudoBoxLabel]:
    """Label a stream of pairs; failing pairs are logged and skipped.

    With ``workers > 1`` pairs are spread over processes. Results are merged in
    input order, so the output does not depend on the worker count. The source
    and proposal provider must then be picklable.
    """
    labels = []
    ok = failed = 0
    pairs = list(pairs) if workers > 1 else pairs

    def consume(results, ids):
        nonlocal ok, failed
        for pid, (labs, err) in zip(ids, results):
            if err is None:
                labels.extend(labs)
                ok += 1
            else:
                failed += 1
                log.warning("pair %s skipped: %s", pid, err)

    if workers > 1 and len(pairs) > 1:
        ids = [getattr(p, "pair_id", "?") for p in pairs]
        n = len(pairs)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_label_one, pairs, [vocab] * n, [source] * n, [proposals] * n,
                               chunksize=max(1, n // (4 * workers)))
            consume(results, ids)
    else:
        for pair in pairs:
            consume([_label_one(pair, vocab, source, proposals)], [getattr(pair, "pair_id", "?")])
    if stats is not None:
        stats.update(ok=ok, failed=failed)
    return sorted(labels, key=PseudoBoxLabel.sort_key)
