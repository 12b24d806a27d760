"""Command-line pipeline: synth, generate-labels, train, finetune, eval, ablate, visualize.

Every subcommand takes ``--config FILE`` (a JSON object whose keys are the
long flag names with dashes turned into underscores) and flags that override
it. Data goes to files; logs and summaries go to stderr. Exit status is 0 on
success, 1 on a runtime failure and 2 on a usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from .boxes import InvalidInputError
from .data_io import (DEFAULT_NOVEL, SynthConfig, export_overlay, load_coco_annotations,
                      load_embeddings, load_pairs, pseudo_label_to_json, save_pseudo_labels,
                      load_pseudo_labels, synth_dataset, write_dataset)
from .detector import (PRESETS, ShapeBackbone, TrainConfig, fine_tune, infer, load_checkpoint,
                       save_checkpoint, train)
from .evaluation import Detection, EvalReport, generalized_eval, transfer_eval, write_report
from .pseudo_label import (ImportedActivationSource, ObjectVocabulary, ProposalSource,
                           ToyActivationSource, generate_for_pairs, load_vocabulary,
                           match_vocabulary, select_box, upsample_activation)
from .vlm_core import ModelConfig, ToyVLM

log = logging.getLogger("pseudobox")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, config keys, or missing inputs."""


class RunFailure(Exception):
    """The run could not produce a result from otherwise valid inputs."""


# -- argument handling ------------------------------------------------------------

def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


# (flag, argparse kwargs, default). Defaults live here rather than in argparse so
# that a config file can fill anything the command line left unset.
_SEED = ("--seed", {"type": int, "help": "random seed"}, 0)
_WORKERS = ("--workers", {"type": int, "help": "parallel processes for per-pair work"}, 1)
_PAIRS = ("--pairs", {"help": "pairs JSON-lines file (pair_id, image_path, caption)"}, None)
_VOCAB = ("--vocab", {"help": "object vocabulary (JSON lines or JSON array)"}, None)
_PROPOSALS = ("--proposals", {"help": "grid, region-merge, or file:PATH"}, "region-merge")
_MODEL = ("--model", {"help": "toy, or import:DIR with exported attention tensors"}, "toy")
_LEXICON = ("--lexicon", {"help": "JSON word -> [r, g, b] map (or a dataset manifest.json)"}, None)
_LAYER = ("--gradcam-layer", {"type": int, "help": "cross-attention layer used for Grad-CAM"}, None)
_EMB = ("--embeddings", {"help": "text embedding table JSON"}, None)
_PRESET = ("--preset", {"choices": sorted(PRESETS), "help": "training schedule preset"}, "desk")
_ITERS = ("--iterations", {"type": int, "help": "override the preset's iteration count"}, None)
_LR = ("--lr", {"type": float, "help": "override the preset's learning rate"}, None)
_BATCH = ("--batch-size", {"type": int, "help": "override the preset's batch size"}, None)

COMMANDS = {
    "synth": [
        ("--out", {"help": "dataset directory to create"}, None),
        _SEED,
        ("--n-images", {"type": int}, None),
        ("--test-fraction", {"type": float}, None),
        ("--novel", {"type": _csv_list, "help": "comma-separated novel categories ('' for none)"},
         list(DEFAULT_NOVEL)),
        ("--novel-in-train", {"action": argparse.BooleanOptionalAction}, None),
        ("--drop-mentions", {"type": float, "help": "probability of leaving an object out of its caption"},
         None),
    ],
    "generate-labels": [
        _PAIRS, _VOCAB, _PROPOSALS, _MODEL, _LEXICON, _LAYER, _SEED, _WORKERS,
        ("--out", {"help": "pseudo-label JSON-lines file"}, None),
        ("--stdout", {"action": "store_true", "help": "stream labels to stdout instead of --out"}, False),
    ],
    "train": [
        ("--labels", {"help": "pseudo-label JSON-lines file"}, None),
        _PAIRS, _EMB, _VOCAB, _PROPOSALS, _PRESET, _SEED, _ITERS, _LR, _BATCH,
        ("--out", {"help": "checkpoint JSON"}, None),
    ],
    "finetune": [
        ("--checkpoint", {"help": "checkpoint to start from"}, None),
        ("--gt", {"help": "COCO-style ground truth; base categories come from its split fields"}, None),
        _PAIRS, _EMB, _PROPOSALS, _PRESET, _SEED, _ITERS, _LR, _BATCH,
        ("--out", {"help": "checkpoint JSON"}, None),
    ],
    "eval": [
        ("--gt", {"help": "COCO-style ground truth"}, None),
        ("--checkpoint", {"help": "detector checkpoint (with --pairs and --embeddings)"}, None),
        ("--detections", {"help": "JSON-lines detections to score instead of running a checkpoint"}, None),
        _PAIRS, _EMB, _VOCAB, _PROPOSALS,
        ("--mode", {"choices": ["generalized", "transfer"]}, "generalized"),
        ("--threshold", {"type": float, "help": "minimum detection confidence"}, 0.05),
        ("--out", {"help": "report JSON"}, None),
        ("--csv", {"help": "optional per-class CSV"}, None),
        ("--save-detections", {"help": "write the detections as JSON lines"}, None),
    ],
    "ablate": [
        ("--axis", {"choices": ["vocab_size", "proposal_source", "data_amount"]}, None),
        ("--values", {"type": _csv_list, "help": "comma-separated settings for the axis"}, None),
        _PROPOSALS, _PRESET, _SEED, _WORKERS, _ITERS,
        ("--n-images", {"type": int, "help": "synthetic dataset size"}, 300),
        ("--finetune", {"action": argparse.BooleanOptionalAction,
                        "help": "fine-tune on base ground truth before evaluating"}, True),
        ("--synth", {"type": json.loads, "help": "JSON object of extra synthetic-world settings"}, None),
        ("--out", {"help": "CSV table"}, None),
        ("--stdout", {"action": "store_true", "help": "also write the CSV to stdout"}, False),
    ],
    "visualize": [
        _PAIRS, _VOCAB,
        ("--ids", {"type": _csv_list, "help": "comma-separated pair ids (default: all)"}, None),
        _PROPOSALS, _MODEL, _LEXICON, _LAYER, _SEED,
        ("--out", {"help": "output directory for PNG overlays"}, None),
    ],
}

REQUIRED = {
    "synth": ["out"],
    "generate-labels": ["pairs", "vocab"],
    "train": ["labels", "pairs", "embeddings", "out"],
    "finetune": ["checkpoint", "gt", "pairs", "embeddings", "out"],
    "eval": ["gt", "out"],
    "ablate": ["axis", "out"],
    "visualize": ["pairs", "vocab", "out"],
}

# synth accepts every SynthConfig field from a config file, flags or not
_SYNTH_KEYS = set(SynthConfig.__dataclass_fields__)


def _dest(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pseudobox", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; flags override its keys")
        for flag, kwargs, _ in options:
            p.add_argument(flag, default=None, **kwargs)
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over built-in defaults."""
    options = COMMANDS[args.command]
    known = {_dest(f) for f, _, _ in options}
    config = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                config = json.load(f)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(config, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
    allowed = known | (_SYNTH_KEYS if args.command == "synth" else set())
    unknown = sorted(set(config) - allowed)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {unknown}")
    opts = {}
    for flag, _, default in options:
        key = _dest(flag)
        value = getattr(args, key)
        if value is None:
            value = config.get(key, default)
        opts[key] = value
    for key in set(config) - known:
        opts[key] = config[key]
    missing = [k for k in REQUIRED[args.command] if opts.get(k) in (None, "")]
    if args.command == "generate-labels" and opts.get("stdout"):
        pass
    elif args.command == "generate-labels" and not opts.get("out"):
        missing.append("out")
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    return opts


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _train_config(opts: dict, stage: str) -> TrainConfig:
    cfg = PRESETS[opts["preset"]][stage]
    overrides = {"seed": int(opts["seed"])}
    for key in ("iterations", "lr", "batch_size"):
        if opts.get(key) is not None:
            overrides[key] = opts[key]
    return replace(cfg, **overrides)


# -- shared pieces ----------------------------------------------------------------

def _proposal_source(spec: str) -> ProposalSource:
    try:
        return ProposalSource(spec)
    except OSError as exc:
        raise UsageError(f"cannot read proposals: {exc}") from exc


def _load_lexicon(opts: dict) -> dict:
    path = opts.get("lexicon")
    if path is None:
        # a synthetic dataset carries its lexicon next to the pairs file
        candidate = Path(opts["pairs"]).parent / "manifest.json"
        if not candidate.exists():
            return {}
        path = candidate
        log.info("using lexicon from %s", path)
    with open(_existing(path, "lexicon"), encoding="utf-8") as f:
        data = json.load(f)
    lex = data.get("lexicon", data) if isinstance(data, dict) else None
    if not isinstance(lex, dict):
        raise UsageError(f"lexicon {path} must map words to RGB triples")
    return {str(k): [float(v) for v in rgb] for k, rgb in lex.items()}


def _activation_source(opts: dict):
    spec = opts["model"]
    if spec == "toy":
        layer = opts.get("gradcam_layer")
        model = ToyVLM(ModelConfig(seed=int(opts["seed"]), gradcam_layer=layer))
        return ToyActivationSource(model, _load_lexicon(opts))
    if spec.startswith("import:"):
        directory = _existing(spec[len("import:"):], "tensor directory")
        layer = opts.get("gradcam_layer")
        return ImportedActivationSource(directory, layer if layer is not None else 8)
    raise UsageError(f"unknown model source {spec!r}; expected toy or import:DIR")


def _load_pairs(path, ids=None) -> list:
    pairs = list(load_pairs(_existing(path, "pairs file"), skip_missing=True))
    if ids is not None:
        wanted = set(ids)
        pairs = [p for p in pairs if p.pair_id in wanted]
    return pairs


def _label_summary(labels, ok: int, failed: int) -> str:
    counts = Counter(lab.category for lab in labels)
    per_cat = ", ".join(f"{c}={counts[c]}" for c in sorted(counts)) or "none"
    return f"pairs ok={ok} failed={failed} labels={len(labels)} ({per_cat})"


def _write_text(path, text: str) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def _detect(params, pairs, table, categories, proposals: ProposalSource, threshold: float,
            backbone: ShapeBackbone) -> list[Detection]:
    dets = []
    for p in pairs:
        boxes = proposals.boxes(p.pair_id, p.image)
        dets.extend(infer(backbone(p.image), boxes, categories, params, table, p.pair_id,
                          threshold=threshold))
    return dets


def _backbone_from(doc: dict) -> ShapeBackbone:
    grid = (doc.get("extra") or {}).get("backbone_grid")
    return ShapeBackbone(tuple(grid)) if grid else ShapeBackbone()


# -- subcommands ------------------------------------------------------------------

def cmd_synth(opts: dict) -> int:
    fields = {k: opts[k] for k in _SYNTH_KEYS if opts.get(k) is not None}
    fields["seed"] = int(opts["seed"])
    try:
        cfg = SynthConfig.from_dict(fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth config: {exc}") from exc
    manifest, table, _ = synth_dataset(cfg)
    out = write_dataset(manifest, table, opts["out"], cfg)
    print(f"synth: wrote {len(manifest.pairs)} pairs to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_generate_labels(opts: dict) -> int:
    vocab = load_vocabulary(_existing(opts["vocab"], "vocabulary"))
    if len(vocab) == 0:
        log.warning("empty vocabulary: no pseudo labels will be produced")
    source = _activation_source(opts)
    proposals = _proposal_source(opts["proposals"])
    pairs = _load_pairs(opts["pairs"])
    stats: dict = {}
    labels = generate_for_pairs(pairs, vocab, source, proposals, stats, workers=int(opts["workers"]))
    print("generate-labels: " + _label_summary(labels, stats["ok"], stats["failed"]), file=sys.stderr)
    if opts.get("stdout"):
        for lab in labels:
            sys.stdout.write(json.dumps(pseudo_label_to_json(lab), ensure_ascii=False) + "\n")
    if opts.get("out"):
        Path(opts["out"]).parent.mkdir(parents=True, exist_ok=True)
        save_pseudo_labels(labels, opts["out"])
    if stats["ok"] == 0:
        raise RunFailure("no pair was labeled successfully")
    return EXIT_OK


def cmd_train(opts: dict) -> int:
    labels = load_pseudo_labels(_existing(opts["labels"], "labels file"))
    table = load_embeddings(_existing(opts["embeddings"], "embedding table"))
    present = sorted({lab.category for lab in labels} & set(table.categories))
    if opts.get("vocab"):
        allowed = set(load_vocabulary(_existing(opts["vocab"], "vocabulary")).categories)
        present = [c for c in present if c in allowed]
    if not present:
        raise UsageError("no pseudo-label category appears in the embedding table")
    images = {p.pair_id: p.image for p in _load_pairs(opts["pairs"])}
    cfg = _train_config(opts, "train")
    backbone = ShapeBackbone()
    params = train(labels, images, table.subset(present), cfg, backbone,
                   _proposal_source(opts["proposals"]).boxes)
    Path(opts["out"]).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(opts["out"], params, cfg, cfg.iterations,
                    {"categories": present, "backbone_grid": list(backbone.grid)})
    print(f"train: {cfg.iterations} iterations over {len(present)} categories -> {opts['out']}",
          file=sys.stderr)
    return EXIT_OK


def cmd_finetune(opts: dict) -> int:
    params, _, doc = load_checkpoint(_existing(opts["checkpoint"], "checkpoint"))
    gt = load_coco_annotations(_existing(opts["gt"], "ground truth"))
    table = load_embeddings(_existing(opts["embeddings"], "embedding table"))
    base = sorted(c for c in gt.base if c in set(table.categories))
    if not base:
        raise UsageError("ground truth has no base category present in the embedding table")
    images = {p.pair_id: p.image for p in _load_pairs(opts["pairs"])}
    annotations = {i: a for i, a in gt.annotations.items() if i in images}
    cfg = _train_config(opts, "finetune")
    backbone = _backbone_from(doc)
    tuned = fine_tune(params, annotations, images, table, base, cfg, backbone,
                      _proposal_source(opts["proposals"]).boxes)
    extra = dict(doc.get("extra") or {})
    extra["finetuned_on"] = base
    Path(opts["out"]).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(opts["out"], tuned, cfg, cfg.iterations, extra)
    print(f"finetune: {cfg.iterations} iterations on {len(base)} base categories -> {opts['out']}",
          file=sys.stderr)
    return EXIT_OK


def _read_detections(path) -> list[Detection]:
    dets = []
    with open(_existing(path, "detections file"), encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                dets.append(Detection.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: malformed detection ({exc})") from exc
    return dets


def cmd_eval(opts: dict) -> int:
    gt = load_coco_annotations(_existing(opts["gt"], "ground truth"))
    vocab = None
    if opts.get("vocab"):
        vocab = load_vocabulary(_existing(opts["vocab"], "vocabulary")).categories
    if opts["mode"] == "generalized":
        categories = sorted(gt.base | gt.novel)
    else:
        categories = list(vocab) if vocab is not None else gt.categories
    if opts.get("detections"):
        dets = _read_detections(opts["detections"])
    else:
        missing = [k for k in ("checkpoint", "pairs", "embeddings") if not opts.get(k)]
        if missing:
            raise UsageError("eval needs --detections, or --checkpoint with --pairs and --embeddings")
        params, _, doc = load_checkpoint(_existing(opts["checkpoint"], "checkpoint"))
        table = load_embeddings(_existing(opts["embeddings"], "embedding table"))
        pairs = _load_pairs(opts["pairs"], ids=gt.images)
        dets = _detect(params, pairs, table, categories, _proposal_source(opts["proposals"]),
                       float(opts["threshold"]), _backbone_from(doc))
    if opts["mode"] == "generalized":
        report = generalized_eval(dets, gt)
    else:
        report = transfer_eval(dets, gt, categories)
    Path(opts["out"]).parent.mkdir(parents=True, exist_ok=True)
    write_report(report, opts["out"], opts.get("csv"))
    if opts.get("save_detections"):
        _write_text(opts["save_detections"],
                    "".join(json.dumps(d.to_json()) + "\n" for d in dets))
    print(report.format_table())
    return EXIT_OK


# -- ablation ---------------------------------------------------------------------

AXIS_HEADERS = {
    "vocab_size": "Vocabulary",
    "proposal_source": "Proposal Generator",
    "data_amount": "Data of Pseudo Label Generation",
}
AXIS_DEFAULTS = {
    "vocab_size": ["restricted", "full"],
    "proposal_source": ["grid", "region-merge"],
    "data_amount": ["25%", "100%"],
}


def _fraction(value: str) -> float:
    text = value.strip()
    try:
        f = float(text[:-1]) / 100.0 if text.endswith("%") else float(text)
    except ValueError as exc:
        raise UsageError(f"bad data amount {value!r}") from exc
    if not 0.0 < f <= 1.0:
        raise UsageError(f"data amount {value!r} must lie in (0, 100%]")
    return f


def run_setting(manifest, table, vocab: ObjectVocabulary, proposal_spec: str, fraction: float,
                train_cfg: TrainConfig, ft_cfg: Optional[TrainConfig], seed: int,
                workers: int = 1) -> EvalReport:
    """Pseudo-label, train, optionally fine-tune, and evaluate one ablation setting."""
    train_pairs = manifest.pairs_in("train")
    train_pairs = train_pairs[:max(1, int(round(fraction * len(train_pairs))))]
    proposals = ProposalSource(proposal_spec)
    source = ToyActivationSource(ToyVLM(ModelConfig(seed=seed)), manifest.lexicon)
    labels = generate_for_pairs(train_pairs, vocab, source, proposals, workers=workers)
    present = sorted({lab.category for lab in labels} & set(table.categories))
    if not present:
        raise RunFailure("no pseudo labels produced")
    images = {p.pair_id: p.image for p in manifest.pairs}
    backbone = ShapeBackbone()
    # detector proposals stay region-merge so only pseudo-label generation varies
    detector_props = ProposalSource("region-merge")
    params = train(labels, images, table.subset(present), train_cfg, backbone, detector_props.boxes)
    if ft_cfg is not None:
        gt_train = {p.pair_id: list(manifest.ground_truth[p.pair_id]) for p in manifest.pairs_in("train")}
        params = fine_tune(params, gt_train, images, table, manifest.base, ft_cfg, backbone,
                           detector_props.boxes)
    test_gt = manifest.gt_set("test")
    dets = _detect(params, manifest.pairs_in("test"), table, manifest.categories, detector_props,
                   0.05, backbone)
    return generalized_eval(dets, test_gt)


def _fmt_map(v) -> str:
    return "n/a" if v is None else f"{v:.3f}"


def ablation_table(axis: str, rows: list, n_novel: int, n_base: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Method", AXIS_HEADERS[axis], f"Novel AP ({n_novel})", f"Base AP ({n_base})",
                f"Overall AP ({n_novel + n_base})"])

    def fmt(v):
        return "" if v is None else f"{v:.4f}"

    for label, report in rows:
        if isinstance(report, EvalReport):
            w.writerow(["pseudobox", label, fmt(report.novel_map), fmt(report.base_map),
                        fmt(report.overall_map)])
        else:
            w.writerow(["pseudobox", label, "failed", "failed", "failed"])
    return buf.getvalue()


def cmd_ablate(opts: dict) -> int:
    axis = opts["axis"]
    values = opts.get("values") or AXIS_DEFAULTS[axis]
    seed = int(opts["seed"])
    synth = {"n_images": int(opts["n_images"]), "test_fraction": 1.0 / 3.0, "novel": list(DEFAULT_NOVEL),
             # the vocabulary axis needs novel objects in captions to have anything to label
             "novel_in_train": axis == "vocab_size", "seed": seed}
    synth.update(opts.get("synth") or {})
    try:
        cfg = SynthConfig.from_dict(synth)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth settings: {exc}") from exc
    manifest, table, _ = synth_dataset(cfg)
    train_cfg = _train_config(opts, "train")
    ft_cfg = replace(PRESETS[opts["preset"]]["finetune"], seed=seed) if opts["finetune"] else None

    settings = []
    for v in values:
        vocab, spec, fraction = manifest.vocabulary(), opts["proposals"], 1.0
        if axis == "vocab_size":
            if v == "restricted":
                vocab = vocab.restricted(manifest.base)
            elif v != "full":
                raise UsageError(f"vocab_size values are restricted and full, got {v!r}")
            label = f"{v} ({len(vocab)})"
        elif axis == "proposal_source":
            _proposal_source(v)
            spec, label = v, v
        else:
            fraction = _fraction(v)
            label = f"{fraction:.0%}"
        settings.append((label, vocab, spec, fraction))

    rows = []
    for label, vocab, spec, fraction in settings:
        try:
            report = run_setting(manifest, table, vocab, spec, fraction, train_cfg, ft_cfg, seed,
                                 int(opts["workers"]))
            print(f"ablate {axis}={label}: novel={_fmt_map(report.novel_map)} "
                  f"base={_fmt_map(report.base_map)}", file=sys.stderr)
        except Exception as exc:  # one failing setting must not sink the table
            log.error("ablate %s=%s failed: %s", axis, label, exc)
            report = None
        rows.append((label, report))
    text = ablation_table(axis, rows, len(manifest.novel), len(manifest.base))
    _write_text(opts["out"], text)
    if opts.get("stdout"):
        sys.stdout.write(text)
    if all(r is None for _, r in rows):
        raise RunFailure("every ablation setting failed")
    return EXIT_OK


def cmd_visualize(opts: dict) -> int:
    vocab = load_vocabulary(_existing(opts["vocab"], "vocabulary"))
    source = _activation_source(opts)
    proposals = _proposal_source(opts["proposals"])
    pairs = _load_pairs(opts["pairs"])
    by_id = {p.pair_id: p for p in pairs}
    ids = opts.get("ids") or [p.pair_id for p in pairs]
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for pid in ids:
        pair = by_id.get(pid)
        if pair is None:
            log.warning("pair %s not found; skipped", pid)
            continue
        words, maps = source.token_maps(pair)
        matches = match_vocabulary(words, vocab)
        props = proposals(pair)
        selected = None
        if matches:
            a, b = matches[0].token_span
            grid_map = maps[a:b].mean(axis=0)
            selected, _ = select_box(upsample_activation(grid_map, pair.image.shape[:2]), props)
        else:
            log.warning("pair %s mentions no vocabulary object; showing the mean word map", pid)
            grid_map = maps.mean(axis=0) if len(maps) else np.zeros(1)
        export_overlay(pair.image, grid_map, props, selected, out / f"{pid}.png")
        written += 1
    print(f"visualize: wrote {written} overlays to {out}", file=sys.stderr)
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth,
    "generate-labels": cmd_generate_labels,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "visualize": cmd_visualize,
}


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(args)
        return HANDLERS[args.command](opts)
    except (UsageError, InvalidInputError) as exc:
        print(f"pseudobox {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RunFailure as exc:
        print(f"pseudobox {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure, not a crash with a traceback
        log.debug("unhandled error", exc_info=True)
        print(f"pseudobox {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
