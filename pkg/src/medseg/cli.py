"""Umbrella command line: data generation, training, evaluation, serving,
the annotation pipeline, and dataset validation.

Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .errors import MedsegError

_MIX_KEYS = ("explicit", "reasoning", "negative")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_mix(text: str) -> dict[str, float]:
    mix = {}
    for part in text.split(","):
        if not part.strip():
            continue
        key, _, value = part.partition("=")
        if key.strip() not in _MIX_KEYS:
            raise UsageError(f"unknown mix component {key.strip()!r}")
        mix[key.strip()] = float(value)
    return mix


def build_parser() -> _Parser:
    parser = _Parser(prog="medseg", description=__doc__)
    parser.add_argument("--version", action="store_true",
                        help="print build info and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--mix", type=str,
                   default="explicit=0.4,reasoning=0.4,negative=0.2")

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-t", type=float, default=1.0)
    p.add_argument("--lambda-m", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--eval-every", type=int, default=100)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("serve", help="run the inference HTTP service")
    p.add_argument("--ckpt", type=Path, default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--queue-depth", type=int, default=8)
    p.add_argument("--allow-origin", default="*")

    p = sub.add_parser("pipeline", help="annotation pipeline commands")
    psub = p.add_subparsers(dest="pipeline_command", required=False)
    run = psub.add_parser("run")
    run.add_argument("--in", dest="input_dir", required=True, type=Path)
    run.add_argument("--out", required=True, type=Path)
    run.add_argument("--config", type=Path, default=None)
    resume = psub.add_parser("resume")
    resume.add_argument("--out", required=True, type=Path)
    resume.add_argument("--config", type=Path, default=None)
    status = psub.add_parser("status")
    status.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("validate", help="validate a dataset or session export")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--session", type=Path, default=None)
    return parser


def cmd_gen_data(args) -> int:
    from .synth import SynthConfig, write_dataset

    mix = {k: 0.0 for k in _MIX_KEYS}
    mix.update(_parse_mix(args.mix))
    cfg = SynthConfig(num_samples=args.n, seed=args.seed,
                      image_size=args.size, template_mix=mix)
    manifest = write_dataset(cfg, args.out)
    print(f"wrote {args.n} samples to {manifest}")
    return 0


def cmd_train(args) -> int:
    import torch

    from .data import load_dataset
    from .gcu import GcuConfig
    from .metrics import evaluate_dataset
    from .model import MedSegModel
    from .pg import PgConfig
    from .tokenizer import build_vocab
    from .training import LossWeights, TrainConfig, train

    samples = load_dataset(args.data)
    if not samples:
        raise MedsegError(f"no samples in {args.data}")
    class_names = sorted({c for s in samples for c in s.class_names})
    vocab = build_vocab(classes=tuple(class_names) or ("lesion",))
    torch.manual_seed(args.seed)
    model = MedSegModel(GcuConfig(vocab_size=vocab.size), PgConfig(), vocab)
    weights = LossWeights(lambda_t=args.lambda_t, lambda_m=args.lambda_m)
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size,
                      learning_rate=args.lr, seed=args.seed,
                      eval_every=args.eval_every, checkpoint_dir=args.out)
    eval_subset = samples[:16]

    def eval_fn(m):
        seg, _ = evaluate_dataset(m, eval_subset)
        return seg.dsc_mean

    last = train(samples, model, cfg, weights, eval_fn=eval_fn)
    print(json.dumps(last))
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .metrics import evaluate_dataset, report_json
    from .model import MedSegModel

    samples = load_dataset(args.data)
    model = MedSegModel.load(args.ckpt)
    seg, vqa = evaluate_dataset(model, samples, tau=args.tau)
    report = report_json(seg, vqa)
    if args.out:
        args.out.write_text(report + "\n")
    print(report)
    return 0


def cmd_serve(args) -> int:
    from .server import ServiceConfig, serve

    ckpt = os.environ.get("MEDSEG_CKPT") or args.ckpt
    if ckpt is None:
        raise MedsegError("no checkpoint: pass --ckpt or set MEDSEG_CKPT")
    config = ServiceConfig(queue_depth=args.queue_depth,
                           allow_origin=args.allow_origin)
    server = serve(Path(ckpt), host=args.host, port=args.port, config=config)
    version = server.service.model_version  # type: ignore[attr-defined]
    print(f"serving {version} on {args.host}:{args.port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


def cmd_pipeline(args) -> int:
    from .pipeline import PipelineConfig, pipeline_status, run_pipeline

    if args.pipeline_command in ("run", "resume"):
        out = args.out
        if args.config:
            config = PipelineConfig.from_file(args.config, queue_dir=out)
            if args.pipeline_command == "run":
                stored = out / "pipeline_config.json"
                stored.parent.mkdir(parents=True, exist_ok=True)
                stored.write_text(Path(args.config).read_text())
        else:
            stored = out / "pipeline_config.json"
            config = (PipelineConfig.from_file(stored, queue_dir=out)
                      if stored.is_file() else PipelineConfig())
        input_dir = args.input_dir if args.pipeline_command == "run" else out
        summary = run_pipeline(input_dir, out, config)
        print(json.dumps(summary, indent=2))
        return 0
    if args.pipeline_command == "status":
        print(json.dumps(pipeline_status(args.out), indent=2))
        return 0
    raise UsageError("pipeline needs one of: run, resume, status")


def validate_session_export(path: Path) -> list[str]:
    """Check a UI session export for protocol conformance."""
    from .protocol import parse_grounded

    problems: list[str] = []
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        return [f"unreadable session file: {exc}"]
    turns = doc.get("turns")
    if not isinstance(turns, list):
        return ["session export must contain a 'turns' list"]
    for i, turn in enumerate(turns):
        role = turn.get("role")
        expected = "user" if i % 2 == 0 else "assistant"
        if role != expected:
            problems.append(f"turn {i}: expected role {expected!r}, got {role!r}")
            continue
        try:
            grounded = parse_grounded(turn.get("text", ""))
        except MedsegError as exc:
            problems.append(f"turn {i}: {exc}")
            continue
        if role == "user" and grounded.num_slots:
            problems.append(f"turn {i}: user turn contains SEG slots")
        spans = turn.get("spans", [])
        if role == "assistant" and len(spans) != grounded.num_slots:
            problems.append(
                f"turn {i}: {len(spans)} spans for {grounded.num_slots} slots")
    return problems


def cmd_validate(args) -> int:
    if (args.data is None) == (args.session is None):
        raise UsageError("pass exactly one of --data or --session")
    if args.session is not None:
        problems = validate_session_export(args.session)
        for p in problems:
            print(p, file=sys.stderr)
        print("session ok" if not problems else f"{len(problems)} problem(s)")
        return 0 if not problems else 1

    from .data import load_dataset
    from .protocol import validate_sample

    samples = load_dataset(args.data)
    all_violations = []
    for sample in samples:
        all_violations.extend(validate_sample(sample))
    for v in all_violations:
        print(str(v), file=sys.stderr)
    print(f"{len(samples)} samples, {len(all_violations)} violation(s)")
    return 0 if not all_violations else 1


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.version:
            import torch
            print(f"medseg {__version__} (torch {torch.__version__})")
            return 0
        handlers = {
            "gen-data": cmd_gen_data,
            "train": cmd_train,
            "eval": cmd_eval,
            "serve": cmd_serve,
            "pipeline": cmd_pipeline,
            "validate": cmd_validate,
        }
        if args.command is None:
            parser.print_usage()
            return 1
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (MedsegError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # pragma: no cover - defensive
        import traceback
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
