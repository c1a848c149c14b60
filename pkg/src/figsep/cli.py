"""Command-line entry point: ``figsep <command> ...``.

Exit codes: 0 when every figure is ok, 2 when some figure is partial or has no
labels, 1 on a hard error (bad input, missing or mismatched checkpoint).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from PIL import Image

from .annotation import BBox, DatasetManifest, FigureRecord, SubfigureLabel, load_manifest, save_manifest
from .checkpoint import CheckpointError
from .synth import IMBALANCED_LAYOUT, UNIFORM_LAYOUT, SynthConfig, background_pool, make_corpus, sample_at

logger = logging.getLogger("figsep")

LAYOUTS = {"imbalanced": IMBALANCED_LAYOUT, "uniform": UNIFORM_LAYOUT}
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".gif")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _emit(obj):
    json.dump(obj, sys.stdout, indent=1)
    sys.stdout.write("\n")


def _write_corpus(records, images, out):
    os.makedirs(os.path.join(out, "images"), exist_ok=True)
    saved = []
    for rec, img in zip(records, images):
        rel = os.path.join("images", f"{rec.image_id}.png")
        Image.fromarray(img).save(os.path.join(out, rel))
        saved.append(FigureRecord(**{**rec.__dict__, "image_path": rel}))
    path = os.path.join(out, "manifest.json")
    save_manifest(DatasetManifest(saved), path)
    return path


# -- data ---------------------------------------------------------------------


def load_training_data(config, base_dir, default_n=500):
    """``(records, images)`` from the config's ``data`` section.

    ``{"manifest": path, "split": "train"}`` reads a dataset; ``{"synthetic":
    {"n": 500, "seed": 0, "layout": "imbalanced"}}`` generates one.
    """
    data = config.get("data", {"synthetic": {}})
    if "manifest" in data:
        path = data["manifest"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        manifest = load_manifest(path)
        if data.get("split"):
            manifest = manifest.subset(data["split"])
        if not len(manifest):
            raise ValueError(f"no training records in {path}")
        return list(manifest.records), [r.load_image(manifest.root) for r in manifest.records]
    syn = dict(data.get("synthetic", {}))
    layout = LAYOUTS[syn.pop("layout", "imbalanced")]
    return make_corpus(int(syn.pop("n", default_n)), seed=int(syn.pop("seed", 0)), layout=layout)


def _checkpoint_path(config, base_dir, key, override=None):
    path = override or config.get("checkpoints", {}).get(key)
    if not path:
        raise ValueError(f"config has no checkpoints.{key} entry")
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


# -- commands -----------------------------------------------------------------


def cmd_synth(args):
    if args.kind == "figures":
        records, images = make_corpus(args.n, seed=args.seed, layout=LAYOUTS[args.layout], split=args.split)
        path = _write_corpus(records, images, args.out)
    else:
        recs, imgs = make_corpus(max(10, args.n // 20), seed=args.seed + 7919)
        pool = background_pool(imgs, recs, per_image=4, seed=args.seed)
        cfg = SynthConfig(seed=args.seed)
        os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
        records = []
        for k in range(args.n):
            patch, letter = sample_at(cfg, pool, k)
            h, w = patch.shape[:2]
            pid = f"patch-{args.seed}-{k:06d}"
            rel = os.path.join("images", f"{pid}.png")
            Image.fromarray(patch).save(os.path.join(args.out, rel))
            # a patch is a one-label record whose label box is the whole patch
            records.append(FigureRecord(pid, w, h, labels=(SubfigureLabel(letter, BBox(0, 0, w, h)),), image_path=rel))
        path = os.path.join(args.out, "manifest.json")
        save_manifest(DatasetManifest(records, alphabet=cfg.alphabet), path)
    print(path)
    return 0


def cmd_train(args):
    from .classifier import LabelClassifier, label_patches
    from .label_detector import LabelDetector
    from .master_detector import MasterDetector

    config = _read_json(args.config)
    base = os.path.dirname(os.path.abspath(args.config))
    if args.model == "classifier":
        params = dict(config.get("classifier", {}))
        records, images = load_training_data(config, base, default_n=200)
        pool = background_pool(images, records, per_image=4, seed=params.get("seed", 0))
        X, y = [], []
        for img, rec in zip(images, records):
            p, l = label_patches(img, rec.labels)
            X += p
            y += l
        model = LabelClassifier(**params).fit(X or None, y or None, backgrounds=pool)
        out = _checkpoint_path(config, base, "classifier")
    elif args.model == "label-detector":
        params = dict(config.get("label_detector", {}))
        records, images = load_training_data(config, base)
        clf_path = args.classifier or config.get("checkpoints", {}).get("classifier")
        classifier = None
        if clf_path:
            classifier = LabelClassifier.load(clf_path if os.path.isabs(clf_path) else os.path.join(base, clf_path))
        model = LabelDetector(**params).fit(images, [r.labels for r in records], classifier=classifier)
        out = _checkpoint_path(config, base, "label_detector")
    else:
        params = dict(config.get("master_detector", {}))
        records, images = load_training_data(config, base)
        model = MasterDetector(**params).fit(images, records)
        out = _checkpoint_path(config, base, "master_detector")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    model.save(out)
    print(out)
    return 0


def _pipeline(args):
    from .pipeline import PipelineConfig, load_models

    config = PipelineConfig.from_file(args.config)
    if getattr(args, "out", None):
        config.output_dir = args.out
    if getattr(args, "workers", None):
        config.workers = args.workers
    return config, load_models(config)


def _labels_from_json(path):
    doc = _read_json(path)
    items = doc["labels"] if isinstance(doc, dict) else doc
    return [SubfigureLabel(d["letter"], BBox(*d["box"]), float(d.get("confidence", 1.0))) for d in items]


def _label_dict(l):
    return {"letter": l.letter, "box": list(l.box.as_tuple()), "confidence": l.confidence}


def cmd_detect(args):
    from .label_detector import detect_labels
    from .pipeline import clean_labels, read_image

    config, models = _pipeline(args)
    img = read_image(args.image)
    if args.what == "labels":
        _emit([_label_dict(l) for l in detect_labels(models.label_detector, img, config.label_conf)])
        return 0
    if args.labels == "auto":
        labels = clean_labels(detect_labels(models.label_detector, img, config.label_conf), config.cross_letter_iou)
    else:
        labels = _labels_from_json(args.labels)
    if not labels:
        logger.warning("no subfigure labels: nothing to condition master detection on")
        _emit([])
        return 2
    _emit([p.to_dict() for p in models.master_detector.predict_one(img, labels)])
    return 0


def _caption_for(caption_arg, image_path):
    """Caption text from a file or the literal argument; without one, an ``<image>.txt`` sidecar."""
    if caption_arg is None:
        side = os.path.splitext(image_path)[0] + ".txt"
        return open(side).read() if os.path.exists(side) else None
    if os.path.isfile(caption_arg):
        return open(caption_arg).read()
    return caption_arg


def cmd_separate(args):
    from .pipeline import exit_code, separate_many

    config, models = _pipeline(args)
    if os.path.isdir(args.input):
        paths = sorted(
            os.path.join(args.input, f) for f in os.listdir(args.input) if f.lower().endswith(IMAGE_EXTS)
        )
        if not paths:
            logger.error("no images in %s", args.input)
            return 1
        # a literal caption is ambiguous for a directory; only files or sidecars apply
        items = [
            (p, _caption_for(args.caption if args.caption and os.path.isfile(args.caption) else None, p), None)
            for p in paths
        ]
    else:
        items = [(args.input, _caption_for(args.caption, args.input), None)]
    results = separate_many(items, config, models=models)
    out = []
    for (path, _, _), r in zip(items, results):
        if isinstance(r, Exception):
            out.append({"figure_id": os.path.basename(path), "status": "error", "error": str(r)})
        else:
            out.append(r.to_dict())
    if config.output_dir:
        os.makedirs(config.output_dir, exist_ok=True)
        with open(os.path.join(config.output_dir, "results.json"), "w") as fh:
            json.dump(out, fh, indent=1)
    _emit(out)
    return exit_code(results)


def cmd_eval(args):
    from .pipeline import evaluate_pipeline

    config, models = _pipeline(args)
    manifest = load_manifest(args.manifest)
    label_report, master_report = evaluate_pipeline(manifest, config, models=models)
    print("label detection (AP per letter, IoU 0.5)")
    print(label_report.table(list(models.label_detector.alphabet)))
    print(f"master detection: AP@0.5 {master_report.map:.4f}  TP {master_report.tp}  FP {master_report.fp}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"labels": label_report.to_dict(), "masters": master_report.to_dict()}, fh, indent=1)
    return 0


# -- parser -------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="figsep", description="Compound figure separation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic patches or figures")
    s.add_argument("kind", choices=["patches", "figures"])
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--layout", choices=sorted(LAYOUTS), default="imbalanced")
    s.add_argument("--split", choices=["train", "test"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model from a JSON config")
    t.add_argument("model", choices=["classifier", "label-detector", "master-detector"])
    t.add_argument("--config", required=True)
    t.add_argument("--classifier", help="classifier checkpoint for label-detector fine-tuning")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="run a single detector on one image")
    d.add_argument("what", choices=["labels", "masters"])
    d.add_argument("image")
    d.add_argument("--config", required=True)
    d.add_argument("--labels", default="auto", help="labels JSON file, or 'auto' to detect them")
    d.set_defaults(func=cmd_detect)

    sp = sub.add_parser("separate", help="separate a figure or a directory of figures")
    sp.add_argument("input")
    sp.add_argument("--caption", help="caption text or file (directories: a file, else <image>.txt sidecars)")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_separate)

    e = sub.add_parser("eval", help="evaluate on a manifest's test split")
    e.add_argument("--manifest", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--json", help="also write the reports here")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    from .pipeline import PipelineError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (PipelineError, CheckpointError, ValueError, OSError, KeyError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
