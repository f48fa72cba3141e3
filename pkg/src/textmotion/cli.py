"""``textmotion`` command line: dataset tooling, training stages, generation, evaluation and export.

Every command writes one run manifest (JSON) describing what ran. Configuration
is layered: dataclass defaults, then the matching section of ``--config`` JSON,
then explicit flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from . import __version__
from .config import DecodeSchedule, MmtConfig, TrainConfig, VqConfig, from_dict, stage_defaults, to_dict
from .dataset import Corpus, DatasetManifest, MotionClip, resample, write_corpus
from .errors import TextMotionError
from .export import FORMATS, export_clip
from .inference import MotionPipeline, completion_spans
from .metrics import (FeatureStats, diversity, fid, metric_report, mmdist_from_features,
                      r_precision_from_features, repeated_trials, train_evaluator)
from .mmt import mmt_param_count
from .pose_features import SkeletonClip, read_features, recover, write_features
from .synth import synth_generate
from .training import (blob_checksum, eval_plans, load_t2m, load_vqvae, model_nll,
                       tokenize_corpus, train_stage1, train_stage2, train_stage3, unigram_nll)

log = logging.getLogger("textmotion")

DATA_ENV = "GM3_DATA_DIR"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config plumbing

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_config_flags(p: argparse.ArgumentParser, section: str, defaults: Any,
                     skip: tuple[str, ...] = (), variants: dict[str, Any] | None = None) -> None:
    """One flag per dataclass field; ``variants`` names alternative defaults shown in the help."""
    g = p.add_argument_group(f"{section} config")
    for f in dataclasses.fields(defaults):
        if f.name in skip:
            continue
        value = getattr(defaults, f.name)

        def show(v):
            return " ".join(map(str, v)) if isinstance(v, tuple) else str(v)

        notes = [f"{k}: {show(getattr(d, f.name))}" for k, d in (variants or {}).items()
                 if getattr(d, f.name) != value]
        help = f"(default: {show(value)}{''.join('; ' + n for n in notes)})"
        kw: dict[str, Any] = {"dest": f"{section}.{f.name}", "default": None, "help": help}
        if isinstance(value, bool):
            kw["action"] = argparse.BooleanOptionalAction
        elif isinstance(value, tuple):
            kw.update(type=type(value[0]), nargs=len(value), metavar=f.name.upper())
        else:
            kw.update(type=type(value), metavar=f.name.upper())
        g.add_argument(_flag(f.name), **kw)


def effective(args: argparse.Namespace, section: str, defaults: Any) -> Any:
    """defaults < config file section < flags."""
    values = to_dict(defaults)
    file_cfg = getattr(args, "_file_config", {}) or {}
    values.update(file_cfg.get(section, {}))
    for k in list(values):
        v = getattr(args, f"{section}.{k}", None)
        if v is not None:
            values[k] = list(v) if isinstance(v, (list, tuple)) else v
    return from_dict(type(defaults), values)


def file_hash(path: str | Path) -> str:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def data_root(args: argparse.Namespace) -> Path:
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise UsageError(f"no corpus given: pass --data or set {DATA_ENV}")
    path = Path(root)
    if not (path / "manifest.json").exists():
        raise UsageError(f"{path} has no manifest.json")
    return path


@dataclasses.dataclass
class Run:
    command: str
    config: dict = dataclasses.field(default_factory=dict)
    seed: int | None = None
    inputs: dict = dataclasses.field(default_factory=dict)
    outputs: list = dataclasses.field(default_factory=list)

    def input(self, name: str, path: str | Path) -> Path:
        self.inputs[name] = {"path": str(path), "sha256": file_hash(path)}
        return Path(path)

    def output(self, path: str | Path) -> Path:
        self.outputs.append(str(path))
        return Path(path)


def _manifest_path(args: argparse.Namespace) -> Path:
    if args.manifest:
        return Path(args.manifest)
    out = getattr(args, "out", None)
    if out is None:
        return Path("run_manifest.json")
    out = Path(out)
    return out / "run_manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------- helpers

def _load_corpus(args, run: Run, train: TrainConfig | None = None) -> tuple[Path, Corpus]:
    root = data_root(args)
    run.input("data", root)
    holdout = train.holdout if train is not None else 0.1
    return root, Corpus.from_manifest(root / "manifest.json", holdout=holdout)


def _pipeline(args, run: Run, seed: int) -> MotionPipeline:
    torch.manual_seed(seed)
    vq, norm, _, _ = load_vqvae(run.input("vq", args.vq))
    model, _, _ = load_t2m(run.input("model", args.model))
    return MotionPipeline(vq, norm, model)


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_generation(out: Path, run: Run, gen, extra: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_json(run.output(out / "tokens.json"),
                {"tokens": gen.tokens.tolist(), "codes": gen.codes.tolist(), **extra})
    if gen.features is not None:
        write_features(run.output(out / "features.gm3f"), gen.features)
        gen.clip.save(run.output(out / "motion.json"))


def _read_tokens(path: Path) -> np.ndarray:
    obj = json.loads(path.read_text())
    toks = obj["tokens"] if isinstance(obj, dict) else obj
    return np.asarray(toks, dtype=np.int64)


# ---------------------------------------------------------------- commands

def cmd_dataset(args, run: Run) -> None:
    out = Path(args.out) if args.out else None
    if args.action == "synth":
        run.seed = args.seed
        run.config = {"clips": args.clips, "fps": args.fps}
        clips = [MotionClip.from_synth(c) for c in synth_generate(args.seed, args.clips, fps=args.fps)]
        manifest = write_corpus(clips, out)
        run.output(out / "manifest.json")
        print(json.dumps(manifest.stats(), sort_keys=True))
    elif args.action == "segment":
        clip = MotionClip(Path(args.input).stem, args.source, SkeletonClip.load(run.input("input", args.input)),
                          list(args.text or []))
        manifest = write_corpus([clip], out)
        run.output(out / "manifest.json")
        print(json.dumps(manifest.stats(), sort_keys=True))
    elif args.action == "resample":
        run.config = {"fps": args.fps}
        clip = MotionClip("clip", "input", SkeletonClip.load(run.input("input", args.input)))
        resample(clip, args.fps).skeleton.save(run.output(out))
    elif args.action == "stats":
        root = data_root(args)
        run.input("data", root)
        stats = DatasetManifest.load(root / "manifest.json").stats()
        if out is not None:
            _write_json(run.output(out), stats)
        print(json.dumps(stats, sort_keys=True))


def cmd_train(args, run: Run) -> None:
    stage = {"vq": 1, "pretrain": 2, "t2m": 3}[args.stage]
    cfg = effective(args, "train", stage_defaults(stage))
    cfg = dataclasses.replace(cfg, stage=stage, seed=args.seed)
    run.seed = args.seed
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = run.output(Path(args.log) if args.log else out.with_name(out.name + ".log.jsonl"))
    _, corpus = _load_corpus(args, run, cfg)
    if stage == 1:
        vq_cfg = effective(args, "vq", VqConfig())
        run.config = {"train": to_dict(cfg), "vq": to_dict(vq_cfg)}
        torch.manual_seed(cfg.seed)
        train_stage1(corpus, vq_cfg, cfg, log_path=log_path, checkpoint_path=run.output(out))
        return
    vq, _, _, _ = load_vqvae(run.input("vq", args.vq))
    clips = tokenize_corpus(vq, corpus, "train")
    checksum = blob_checksum(vq)
    if stage == 2:
        mmt_cfg = effective(args, "mmt", MmtConfig(n_codes=vq.cfg.n_codes))
        run.config = {"train": to_dict(cfg), "mmt": to_dict(mmt_cfg)}
        train_stage2(clips, mmt_cfg, cfg, log_path=log_path, checkpoint_path=run.output(out), vq_checksum=checksum)
        return
    init = None
    if args.init:
        init, _, _ = load_t2m(run.input("init", args.init))
        mmt_cfg = init.cfg
    else:
        mmt_cfg = effective(args, "mmt", MmtConfig(n_codes=vq.cfg.n_codes))
    run.config = {"train": to_dict(cfg), "mmt": to_dict(mmt_cfg)}
    _, _, skipped = train_stage3(clips, init, cfg, mmt_cfg, log_path=log_path, checkpoint_path=run.output(out),
                                 vq_checksum=checksum)
    if skipped:
        print(f"skipped {skipped} clips without text", file=sys.stderr)


def _schedule(args, run: Run) -> DecodeSchedule:
    sched = dataclasses.replace(effective(args, "decode", DecodeSchedule()), seed=args.seed)
    sched.validate()
    run.seed = args.seed
    run.config["decode"] = to_dict(sched)
    return sched


def cmd_generate(args, run: Run) -> None:
    sched = _schedule(args, run)
    run.config.update({"text": args.text, "tokens": args.tokens})
    pipe = _pipeline(args, run, args.seed)
    gen = pipe.generate(args.text, args.tokens, sched)
    _write_generation(Path(args.out), run, gen, {"text": args.text})


def cmd_complete(args, run: Run) -> None:
    sched = _schedule(args, run)
    run.config.update({"text": args.text, "mode": args.mode, "hidden_fraction": args.hidden_fraction})
    pipe = _pipeline(args, run, args.seed)
    src = run.input("input", args.input)
    if src.suffix == ".json":
        tokens = _read_tokens(src)
    else:
        tokens = pipe.tokenize_features(read_features(src).features)
    tokens = tokens[tokens < pipe.model.cfg.n_codes]
    gen = pipe.complete(args.text, tokens, args.mode, sched, args.hidden_fraction)
    observed, generated = completion_spans(len(tokens), args.mode, args.hidden_fraction)
    ok = all(np.array_equal(gen.tokens[a:b], tokens[a:b]) for a, b in observed)
    _write_generation(Path(args.out), run, gen, {"text": args.text, "mode": args.mode,
                                                 "observed": observed, "generated": generated})
    verdict = "PASS" if ok else "FAIL"
    print(f"{verdict} {args.mode}: observed spans {observed} {'preserved' if ok else 'changed'}")
    if not ok:
        raise TextMotionError("completion changed an observed span")


def cmd_evaluate(args, run: Run) -> None:
    sched = _schedule(args, run)
    _, corpus = _load_corpus(args, run)
    pipe = _pipeline(args, run, args.seed)
    train_items = corpus.split("train")
    arrays = [corpus.normalized(it) for it in train_items]
    evaluator, _ = train_evaluator(arrays, [it.texts for it in train_items], steps=args.evaluator_steps,
                                   seed=args.seed)
    pool = corpus.split("holdout") + train_items
    items = [it for it in pool if it.texts][:args.samples]
    if len(items) < args.pool_size:
        raise UsageError(f"need at least {args.pool_size} captioned clips, corpus has {len(items)}")
    real = [corpus.normalized(it) for it in items]
    texts = [it.texts[0] for it in items]
    lengths = [len(pipe.tokenize_features(it.features)) for it in items]
    real_f = evaluator.motion_features(real)
    text_f = evaluator.text_features(texts)
    run.config.update({"samples": len(items), "pool_size": args.pool_size, "trials": args.trials,
                       "evaluator_steps": args.evaluator_steps})

    cache: dict[int, np.ndarray] = {}

    def generated(seed: int) -> np.ndarray:
        if seed not in cache:
            feats = []
            for i, (t, n) in enumerate(zip(texts, lengths)):
                g = pipe.generate(t, n, dataclasses.replace(sched, seed=seed + i))
                f = g.features.features if g.features is not None else pipe.normalizer.mean[None]
                feats.append(pipe.normalizer.normalize(f).astype(np.float32))
            cache[seed] = evaluator.motion_features(feats)
        return cache[seed]

    n_div = min(args.samples, len(items)) // 2
    metrics: dict[str, Callable[[int], float]] = {
        "fid": lambda s: fid(FeatureStats.of(real_f), FeatureStats.of(generated(s))),
        "r_precision_top1": lambda s: r_precision_from_features(text_f, generated(s), args.pool_size, s)[0],
        "r_precision_top2": lambda s: r_precision_from_features(text_f, generated(s), args.pool_size, s)[1],
        "r_precision_top3": lambda s: r_precision_from_features(text_f, generated(s), args.pool_size, s)[2],
        "mmdist": lambda s: mmdist_from_features(text_f, generated(s)),
        "diversity": lambda s: diversity(generated(s), n_div, s),
    }
    report = [metric_report(name, repeated_trials(fn, args.trials, args.seed), run.config)
              for name, fn in metrics.items()]
    _write_json(run.output(Path(args.out)), {"metrics": report})
    print(json.dumps(report, sort_keys=True))


def cmd_export(args, run: Run) -> None:
    src = run.input("input", args.input)
    run.config = {"format": args.format}
    if src.suffix == ".json":
        clip = SkeletonClip.load(src)
    else:
        clip = recover(read_features(src))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    export_clip(clip, run.output(args.out), args.format)


def cmd_ablate(args, run: Run) -> None:
    cfg = dataclasses.replace(effective(args, "train", stage_defaults(3)), stage=3, seed=args.seed)
    run.seed = args.seed
    paths = {p.strip() for p in args.pathways.split(",") if p.strip()}
    unknown = paths - {"motion", "text", "cross"}
    if unknown or "motion" not in paths:
        raise UsageError(f"--pathways must list motion plus optional text,cross; got {args.pathways!r}")
    _, corpus = _load_corpus(args, run, cfg)
    vq, _, _, _ = load_vqvae(run.input("vq", args.vq))
    base = effective(args, "mmt", MmtConfig(n_codes=vq.cfg.n_codes))
    mmt_cfg = dataclasses.replace(base, use_text_path="text" in paths, use_cross_path="cross" in paths,
                                  experts_motion=args.experts, experts_text=args.experts,
                                  experts_cross=args.experts, gating=args.gating)
    mmt_cfg.validate()
    run.config = {"train": to_dict(cfg), "mmt": to_dict(mmt_cfg)}
    train_clips = tokenize_corpus(vq, corpus, "train")
    held = [c for c in tokenize_corpus(vq, corpus, "holdout") if c.texts]
    if not held:
        raise UsageError("held-out split is empty; use a larger corpus")
    model, hist, _ = train_stage3(train_clips, None, cfg, mmt_cfg)
    plans = eval_plans(held, args.seed, draws=4)
    nll = model_nll(model, held, plans, lambda i: held[i].texts[0])
    result = {"pathways": sorted(paths), "experts": args.experts, "gating": args.gating,
              "params": mmt_param_count(mmt_cfg), "heldout_nll": nll,
              "unigram_nll": unigram_nll(train_clips, held, plans, mmt_cfg.vocab),
              "final_train_loss": hist[-1]["loss"] if hist else None}
    _write_json(run.output(Path(args.out)), result)
    print(json.dumps(result, sort_keys=True))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="textmotion", description="Text-to-motion tokenizer and masked transformer.")
    p.add_argument("--config", help="JSON file with optional train/vq/mmt/decode sections")
    p.add_argument("--manifest", help="run manifest path (default: next to the primary output)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_flag(q):
        q.add_argument("--data", help=f"corpus directory with manifest.json (default: ${DATA_ENV})")

    ds = sub.add_parser("dataset", help="corpus tooling").add_subparsers(dest="action", required=True)
    q = ds.add_parser("synth", help="generate a captioned synthetic corpus")
    q.add_argument("--clips", type=int, default=200, help="(default: 200)")
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--fps", type=float, default=30.0, help="(default: 30.0)")
    q.add_argument("--out", required=True)
    q = ds.add_parser("segment", help="window a skeleton clip (JSON) into a corpus")
    q.add_argument("--input", required=True)
    q.add_argument("--text", action="append", help="caption (repeatable)")
    q.add_argument("--source", default="import", help="(default: import)")
    q.add_argument("--out", required=True)
    q = ds.add_parser("resample", help="resample a skeleton clip (JSON)")
    q.add_argument("--input", required=True)
    q.add_argument("--fps", type=float, default=30.0, help="(default: 30.0)")
    q.add_argument("--out", required=True)
    q = ds.add_parser("stats", help="print manifest totals")
    data_flag(q)
    q.add_argument("--out")

    tr = sub.add_parser("train", help="training stages")
    tr.add_argument("stage", choices=["vq", "pretrain", "t2m"])
    data_flag(tr)
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--log", help="metric log (default: <out>.log.jsonl)")
    tr.add_argument("--vq", help="tokenizer checkpoint (pretrain, t2m)")
    tr.add_argument("--init", help="pretrained transformer checkpoint (t2m)")
    add_config_flags(tr, "train", TrainConfig(), skip=("stage", "seed"), variants={"vq": stage_defaults(1)})
    add_config_flags(tr, "vq", VqConfig())
    add_config_flags(tr, "mmt", MmtConfig(), skip=("n_codes",))  # follows the tokenizer

    def decode_cmd(name, help):
        q = sub.add_parser(name, help=help)
        q.add_argument("--vq", required=True)
        q.add_argument("--model", required=True)
        q.add_argument("--seed", type=int, required=True)
        add_config_flags(q, "decode", DecodeSchedule(), skip=("seed",))
        return q

    q = decode_cmd("generate", "text to motion")
    q.add_argument("--text", required=True)
    q.add_argument("--tokens", type=int, required=True, help="motion length in tokens")
    q.add_argument("--out", required=True, help="output directory")

    q = decode_cmd("complete", "motion in-betweening")
    q.add_argument("--mode", choices=["prefix", "suffix", "infix"], required=True)
    q.add_argument("--text", required=True)
    q.add_argument("--input", required=True, help="tokens JSON or feature file")
    q.add_argument("--hidden-fraction", type=float, default=0.5, help="(default: 0.5)")
    q.add_argument("--out", required=True, help="output directory")

    q = decode_cmd("evaluate", "FID, R-precision, MMDist and diversity over repeated trials")
    data_flag(q)
    q.add_argument("--trials", type=int, default=20, help="(default: 20)")
    q.add_argument("--samples", type=int, default=32, help="(default: 32)")
    q.add_argument("--pool-size", type=int, default=32, help="(default: 32)")
    q.add_argument("--evaluator-steps", type=int, default=300, help="(default: 300)")
    q.add_argument("--out", required=True, help="report JSON")

    q = sub.add_parser("export", help="convert a clip or feature file")
    q.add_argument("--format", choices=FORMATS, required=True)
    q.add_argument("--input", required=True, help="skeleton clip JSON or feature file")
    q.add_argument("--out", required=True)

    q = sub.add_parser("ablate", help="train a t2m variant and report held-out NLL")
    data_flag(q)
    q.add_argument("--vq", required=True)
    q.add_argument("--seed", type=int, required=True)
    q.add_argument("--pathways", default="motion,text,cross", help="(default: motion,text,cross)")
    q.add_argument("--experts", type=int, default=2, help="(default: 2)")
    q.add_argument("--gating", choices=["dense", "sparse"], default="dense", help="(default: dense)")
    q.add_argument("--out", required=True, help="report JSON")
    add_config_flags(q, "train", TrainConfig(), skip=("stage", "seed"))
    add_config_flags(q, "mmt", MmtConfig(), skip=("n_codes", "gating", "use_text_path", "use_cross_path",
                                               "experts_motion", "experts_text", "experts_cross"))
    return p


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "generate": cmd_generate, "complete": cmd_complete,
            "evaluate": cmd_evaluate, "export": cmd_export, "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    label = " ".join(x for x in (args.command, getattr(args, "action", None), getattr(args, "stage", None)) if x)
    run = Run(label)
    start = time.perf_counter()
    try:
        args._file_config = json.loads(Path(args.config).read_text()) if args.config else {}
        if args.config:
            run.input("config", args.config)
        COMMANDS[args.command](args, run)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"textmotion: error: {e}", file=sys.stderr)
        return 2
    except (TextMotionError, OSError, json.JSONDecodeError) as e:
        print(f"textmotion: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    _write_json(_manifest_path(args), {
        "command": run.command, "argv": sys.argv[1:] if argv is None else list(argv),
        "config": run.config, "seed": run.seed, "build": f"textmotion {__version__}",
        "inputs": run.inputs, "outputs": run.outputs, "wall_time_s": round(time.perf_counter() - start, 3)})
    return 0


if __name__ == "__main__":
    sys.exit(main())
