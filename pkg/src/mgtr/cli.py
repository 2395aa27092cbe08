"""Command line entry point: ``mgtr {train,eval,infer,synth-data,viz-attention}``.

Every subcommand takes ``--config file.json`` plus any number of flat
``--key value`` overrides. Output paths go to stdout, progress to stderr, and
failures exit nonzero with a JSON error object on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, _parse_value
from .data import SyntheticSceneSpec


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def _overrides(extra: list[str]) -> dict[str, str]:
    out, k = {}, 0
    while k < len(extra):
        tok = extra[k]
        if not tok.startswith("--"):
            raise CLIError(f"unexpected argument {tok!r}; overrides take the form --key value")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            k += 1
        elif k + 1 < len(extra):
            val = extra[k + 1]
            k += 2
        else:
            raise CLIError(f"override {tok} is missing a value")
        out[key] = val
    return out


def _run_config(args, extra, base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else (base or RunConfig())
    return cfg.with_overrides(_overrides(extra))


def cmd_train(args, extra):
    from .pipeline import train

    cfg = _run_config(args, extra).with_overrides({"seed": args.seed})
    if args.out_dir:
        cfg = cfg.with_overrides({"out_dir": args.out_dir})
    res = train(cfg, resume=args.resume)
    print(res.checkpoint)
    if res.best_checkpoint is not None and res.best_checkpoint.exists():
        print(res.best_checkpoint)
    print(res.log_path)


def cmd_eval(args, extra):
    from .pipeline import AnnotatedImages, evaluate_model, load_checkpoint

    model, ck_cfg, _ = load_checkpoint(args.checkpoint)
    cfg = _run_config(args, extra, ck_cfg)
    data = AnnotatedImages.from_file(args.annotations, args.image_root)
    report = evaluate_model(model, data, cfg)
    out = Path(args.out or Path(args.checkpoint).with_name("eval.json"))
    report.to_json(out)
    print(out)
    if args.matches:
        report.write_matches(args.matches)
        print(args.matches)


def cmd_infer(args, extra):
    from .pipeline import infer, load_checkpoint

    model, ck_cfg, _ = load_checkpoint(args.checkpoint)
    cfg = _run_config(args, extra, ck_cfg)
    res = infer((model, cfg), args.images)
    payload = {
        "images_per_sec": res.images_per_sec,
        "results": [
            {"image": str(img), "detections": [d.to_json() for d in dets]}
            for img, dets in zip(args.images, res.detections)
        ],
    }
    out = Path(args.out)
    out.write_text(json.dumps(payload, indent=1) + "\n")
    print(out)


def cmd_synth(args, extra):
    from .pipeline import synth_data

    d = json.loads(Path(args.config).read_text()) if args.config else {}
    for k, v in _overrides(extra).items():
        d[k.replace("-", "_")] = _parse_value(v)
    if args.seed is not None:
        d["seed"] = args.seed
    names = {f.name for f in dataclasses.fields(SyntheticSceneSpec)}
    unknown = set(d) - names
    if unknown:
        raise CLIError(f"unknown scene keys {sorted(unknown)}")
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    print(synth_data(SyntheticSceneSpec(**d), args.out_dir, args.n_images, args.start))


def cmd_viz(args, extra):
    from .pipeline import export_attention, load_checkpoint

    model, ck_cfg, _ = load_checkpoint(args.checkpoint)
    cfg = _run_config(args, extra, ck_cfg)
    exp = export_attention((model, cfg), args.image, args.out_dir, args.top_k)
    for p in exp.paths:
        print(p)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mgtr", description="Mutual gaze detection with a set-prediction transformer.")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out-dir")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on an annotation file")
    e.add_argument("--config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--annotations", required=True)
    e.add_argument("--image-root")
    e.add_argument("--out", help="report path (default: eval.json next to the checkpoint)")
    e.add_argument("--matches", help="also write per-image match records as JSON lines")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="detect mutual gaze instances in images")
    i.add_argument("--config")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", default="detections.json")
    i.add_argument("images", nargs="+")
    i.set_defaults(fn=cmd_infer)

    s = sub.add_parser("synth-data", help="render a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n-images", type=int, default=16)
    s.add_argument("--start", type=int, default=0)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_synth)

    v = sub.add_parser("viz-attention", help="export attention heatmaps for one image")
    v.add_argument("--config")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--image", required=True)
    v.add_argument("--out-dir", required=True)
    v.add_argument("--top-k", type=int, default=3)
    v.set_defaults(fn=cmd_viz)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args, extra = build_parser().parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(asctime)s %(name)s: %(message)s")
        args.fn(args, extra)
    except Exception as exc:  # noqa: BLE001 - reported as JSON
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        json.dump({"error": type(exc).__name__, "message": str(msg)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
