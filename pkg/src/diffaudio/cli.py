"""Command-line entry point: ``diffaudio <command> [flags]``.

Exit codes: 0 success, 1 numeric failure (e.g. a gradient check above
tolerance), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, restore, save_checkpoint
from .config import ConfigError, RunConfig, load_config, preset
from .frontend import AudioFormatError, compute_fbank, load_wav, write_fbank
from .metrics import accuracy, mean_average_precision
from .model import Backbone, Classifier, PretrainModel
from .synthetic import make_dataset

log = logging.getLogger("diffaudio")


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--config", type=Path, help="JSON file overriding preset fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--clones", type=int)


def resolve_config(args) -> RunConfig:
    cfg = preset(args.preset)
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    return cfg.updated(
        seed=getattr(args, "seed", None),
        lam=getattr(args, "lam", None),
        alpha=getattr(args, "alpha", None),
        mask_ratio=getattr(args, "mask_ratio", None),
        n_clones=getattr(args, "clones", None),
    )


def _featurize(cfg: RunConfig, wave) -> np.ndarray:
    return compute_fbank(
        wave, cfg.n_mels, cfg.n_fft, cfg.f_min, cfg.f_max, cfg.log_floor, cfg.fbank_normalize
    ).frames


def read_manifest(path: Path) -> list[dict]:
    """One entry per line: a bare WAV path, or a JSON object with ``path`` and ``label``/``labels``."""
    entries = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("{"):
            entries.append(json.loads(line))
        else:
            entries.append({"path": line})
    base = Path(path).parent
    for e in entries:
        p = Path(e["path"])
        e["path"] = p if p.is_absolute() else base / p
    return entries


def _labeled(args, cfg: RunConfig, split_seed: int):
    """Fbank matrices and labels from ``--manifest`` or the synthetic generator."""
    if args.manifest:
        entries = read_manifest(args.manifest)
        feats = [_featurize(cfg, load_wav(e["path"])) for e in entries]
        if all("label" in e for e in entries):
            labels = np.array([int(e["label"]) for e in entries])
            n_classes = int(labels.max()) + 1
        elif all("labels" in e for e in entries):
            n_classes = 1 + max(max(e["labels"], default=0) for e in entries)
            labels = np.zeros((len(entries), n_classes), dtype=np.int64)
            for i, e in enumerate(entries):
                labels[i, e["labels"]] = 1
        else:
            raise UsageError("labeled manifest entries need a 'label' or 'labels' field")
        return feats, labels, max(n_classes, 2)
    if not args.synthetic:
        raise UsageError("pass --manifest or --synthetic")
    clips, labels = make_dataset(args.n_clips, seed=split_seed, seconds=cfg.clip_seconds)
    return [_featurize(cfg, c) for c in clips], labels, 4


def cmd_featurize(args) -> int:
    cfg = resolve_config(args)
    frames = compute_fbank(load_wav(args.wav), cfg.n_mels, cfg.n_fft, cfg.f_min, cfg.f_max, cfg.log_floor, cfg.fbank_normalize)
    write_fbank(args.out, frames)
    print(json.dumps({"frames": frames.n_frames, "mels": frames.n_mels, "out": str(args.out)}))
    return 0


def cmd_pretrain(args) -> int:
    from .training import pretrain

    cfg = resolve_config(args)
    if args.manifest:
        feats = [_featurize(cfg, load_wav(e["path"])) for e in read_manifest(args.manifest)]
    elif args.synthetic:
        clips, _ = make_dataset(args.n_clips, seed=cfg.seed, seconds=cfg.clip_seconds)
        feats = [_featurize(cfg, c) for c in clips]
    else:
        raise UsageError("pass --manifest or --synthetic")
    model = PretrainModel(cfg)
    with _metrics_sink(args.metrics) as sink:
        history = pretrain(model, feats, args.steps, sink)
    if not all(np.isfinite(h.total) for h in history):
        log.error("non-finite loss encountered")
        return 1
    if args.out:
        save_checkpoint(args.out, model.state_tensors(), cfg, args.steps, {"kind": "pretrain"})
    return 0


def cmd_finetune(args) -> int:
    from .training import finetune

    cfg = resolve_config(args)
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        cfg = RunConfig.from_dict(ck.config).updated(seed=args.seed, lam=args.lam, mask_ratio=args.mask_ratio)
    feats, labels, n_classes = _labeled(args, cfg, cfg.seed + 1)
    clf = Classifier(Backbone(cfg), n_classes)
    if args.checkpoint:
        restore(clf.backbone.parameters(), ck, {"student.": ""})
    with _metrics_sink(args.metrics) as sink:
        losses = finetune(clf, feats, labels, args.steps, sink)
    if not np.all(np.isfinite(losses)):
        return 1
    if args.out:
        save_checkpoint(args.out, clf.state_tensors(), cfg, args.steps, {"kind": "finetune", "n_classes": n_classes})
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(ck.config)
    n_classes = int(ck.extra.get("n_classes", 0))
    if n_classes < 2:
        raise UsageError("eval needs a fine-tuned checkpoint (with a classification head)")
    feats, labels, _ = _labeled(args, cfg, args.split_seed if args.split_seed is not None else cfg.seed + 1)
    clf = Classifier(Backbone(cfg), n_classes)
    restore(clf.parameters(), ck)
    scores = clf.predict_scores(feats)
    result = {"n": len(feats)}
    if labels.ndim == 1:
        onehot = np.zeros((labels.size, n_classes), dtype=np.int64)
        onehot[np.arange(labels.size), labels] = 1
        result["accuracy"] = accuracy(scores.argmax(axis=1), labels)
    else:
        onehot = labels
    m, skipped = mean_average_precision(scores, onehot, return_skipped=True)
    result["mAP"] = m
    result["skipped_classes"] = skipped
    print(json.dumps(result))
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import GRADCHECK_TOL, run_suite

    cfg = resolve_config(args)
    errs = run_suite(cfg, seed=cfg.seed, thorough=args.thorough)
    worst = max(errs.values())
    print(json.dumps({"max_relative_error": worst, "checks": errs, "tolerance": GRADCHECK_TOL}))
    return 0 if worst < GRADCHECK_TOL else 1


def cmd_inspect_attn(args) -> int:
    cfg = resolve_config(args)
    backbone = Backbone(cfg)
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        cfg = RunConfig.from_dict(ck.config)
        backbone = Backbone(cfg)
        prefix = "student." if any(k.startswith("student.") for k in ck.params) else "backbone."
        restore(backbone.parameters(), ck, {prefix: ""})
    if args.wav:
        frames = _featurize(cfg, load_wav(args.wav))
    else:
        clips, _ = make_dataset(1, seed=cfg.seed, seconds=cfg.clip_seconds)
        frames = _featurize(cfg, clips[0])
    out = backbone.encode_full(backbone.embed(frames), keep_traces=True)
    dump_traces(args.out, out.traces, cfg)
    print(json.dumps({"out": str(args.out), "layers": len(out.traces), "heads": cfg.n_heads}))
    return 0


def dump_traces(out_dir, traces, cfg: RunConfig) -> Path:
    """Write every (layer, head) A1/A2/A matrix as float32 LE blobs plus ``manifest.json``."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    items = []
    for li, layer in enumerate(traces):
        for hi, tr in enumerate(layer):
            for kind in ("a1", "a2", "a"):
                arr = np.ascontiguousarray(getattr(tr, kind), dtype="<f4")
                name = f"layer{li}_head{hi}_{kind}.f32"
                (root / name).write_bytes(arr.tobytes())
                items.append({"layer": li, "head": hi, "kind": kind, "file": name, "shape": list(arr.shape), "dtype": "f32le"})
    manifest = {"lambda": cfg.lam, "n_layers": len(traces), "n_heads": cfg.n_heads, "blobs": items}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


@contextlib.contextmanager
def _metrics_sink(path):
    if path is None:
        yield sys.stdout
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            yield fh


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffaudio", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("featurize", help="WAV -> FBNK log-mel dump")
    _add_common(p)
    p.add_argument("wav", type=Path)
    p.add_argument("out", type=Path)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("pretrain", help="masked teacher-student pretraining")
    _add_common(p)
    p.add_argument("--manifest", type=Path, help="text file of WAV paths")
    p.add_argument("--synthetic", action="store_true", help="use generated tone/chirp clips")
    p.add_argument("--n-clips", type=int, default=200)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--metrics", type=Path, help="JSONL metrics log (default stdout)")
    p.add_argument("--out", type=Path, help="checkpoint directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="train a linear head plus encoder on labeled clips")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, help="pretrained checkpoint directory")
    p.add_argument("--manifest", type=Path, help="JSONL manifest with path and label(s)")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--n-clips", type=int, default=200)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--metrics", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="accuracy / mAP of a fine-tuned checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--n-clips", type=int, default=200)
    p.add_argument("--split-seed", type=int, help="synthetic data seed (default: the training split)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks on a fresh model")
    _add_common(p)
    p.add_argument("--thorough", action="store_true", help="perturb every coordinate of the small blocks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-attn", help="dump attention maps")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--wav", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_inspect_attn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, AudioFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"diffaudio {args.command}: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"diffaudio {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
