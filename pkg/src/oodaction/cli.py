"""Command-line interface: gen-synth, train, detect, eval, gradcheck."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .data import SynthConfig, generate_synthetic, load_clip, load_manifest
from .detector import detect, detection_from_json
from .evaluate import build_report, format_table, load_ground_truth
from .training import RunConfig, gradcheck, restore_model, train, train_selected


def _cmd_gen_synth(args) -> int:
    config = SynthConfig(
        num_classes=args.classes,
        frames=args.frames,
        objects=args.objects,
        feature_dim=args.feature_dim,
        train_clips=args.clips,
        val_clips=max(2, args.clips // 4),
        test_clips=max(2, args.clips // 4),
        noise=args.noise,
        separation=args.separation,
    )
    manifests = generate_synthetic(config, args.seed, args.out_dir)
    for split, manifest in manifests.items():
        print(f"{split}: {len(manifest.clip_paths)} clips -> "
              f"{os.path.join(args.out_dir, split + '_manifest.json')}")
    return 0


def _cmd_train(args) -> int:
    config = RunConfig.from_file(args.config)
    manifest = load_manifest(args.data or config.train_manifest)
    out_dir = args.out or config.out_dir or "."
    if args.select_by_val:
        val_manifest = load_manifest(args.select_by_val)
        _model, history, best = train_selected(config, manifest, val_manifest,
                                               out_dir=out_dir)
        print(f"kept epoch {best} by validation score")
    else:
        _model, history = train(config, manifest, out_dir=out_dir,
                                resume_from=args.resume, log_every=args.log_every)
    if history:
        last = history[-1]
        print(f"trained {len(history)} epochs; final loss {last['total']:.4f} "
              f"(L_final {last['L_final']:.4f})")
    print(f"wrote {os.path.join(out_dir, 'loss_log.csv')} and checkpoint.bin")
    return 0


def _iter_clips(args):
    if args.clip:
        yield load_clip(args.clip)
    if args.manifest:
        manifest = load_manifest(args.manifest)
        for path in manifest.clip_paths:
            yield load_clip(path)


def _cmd_detect(args) -> int:
    if not args.clip and not args.manifest:
        print("detect: provide --clip or --manifest", file=sys.stderr)
        return 2
    config = RunConfig.from_file(args.config)
    model = restore_model(args.ckpt, config)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        n = 0
        for clip, _ann in _iter_clips(args):
            for det in detect(model, clip, u_tau=args.u_tau, a_tau=args.a_tau,
                              nms_tiou=args.nms_tiou):
                out.write(det.to_json() + "\n")
                n += 1
    finally:
        if args.out:
            out.close()
            print(f"wrote {n} detections to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    with open(args.detections, "r", encoding="utf-8") as f:
        detections = [detection_from_json(line) for line in f if line.strip()]
    manifest = load_manifest(args.manifest)
    id_gt, ood_gt = load_ground_truth(manifest)
    thresholds = tuple(float(t) for t in args.tiou.split(","))
    report = build_report(detections, id_gt, ood_gt, tiou_thresholds=thresholds,
                          ood_match_tiou=args.ood_match_tiou)
    print(format_table(report))
    if args.out_json:
        with open(args.out_json, "w", encoding="utf-8") as f:
            f.write(report.to_json() + "\n")
    if args.out_csv:
        with open(args.out_csv, "w", encoding="utf-8") as f:
            f.write(report.to_csv())
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradcheck(T=args.frames, S=args.objects, d=args.width,
                       num_classes=args.classes, seed=args.seed)
    for name in sorted(report.per_param):
        print(f"{name:40s} {report.per_param[name]:.3e}")
    status = "PASS" if report.passed(args.tolerance) else "FAIL"
    print(f"max relative error {report.max_rel_error:.3e} at '{report.worst_param}' "
          f"({report.runtime_seconds:.1f}s) -> {status}")
    return 0 if report.passed(args.tolerance) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodaction",
        description="Open-set temporal action detection: synthetic data, "
                    "training, inference, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a deterministic synthetic dataset")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--clips", type=int, default=64, help="train clips; val/test get a quarter each")
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--separation", type=float, default=2.0)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_gen_synth)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="TOML or JSON run config")
    p.add_argument("--data", help="training manifest (overrides config.train_manifest)")
    p.add_argument("--out", help="output directory (overrides config.out_dir)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--select-by-val", metavar="MANIFEST",
                   help="score each epoch on this split and keep the best")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("detect", help="run inference, emit detection JSON lines")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--clip", help="single clip file")
    p.add_argument("--manifest", help="run over every clip in a manifest")
    p.add_argument("--u-tau", type=float, default=0.6)
    p.add_argument("--a-tau", type=float, default=0.5)
    p.add_argument("--nms-tiou", type=float, default=0.5)
    p.add_argument("--out", help="output JSONL path (default stdout)")
    p.set_defaults(fn=_cmd_detect)

    p = sub.add_parser("eval", help="score detections against a manifest")
    p.add_argument("--detections", required=True, help="JSONL from `detect`")
    p.add_argument("--manifest", required=True)
    p.add_argument("--tiou", default="0.3,0.4,0.5,0.6,0.7")
    p.add_argument("--ood-match-tiou", type=float, default=0.5)
    p.add_argument("--out-json")
    p.add_argument("--out-csv")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="audit analytic gradients vs finite differences")
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
