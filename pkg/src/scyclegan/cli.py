"""Batch command-line surface.

Commands: phantom-gen, train, translate, eval, grad-check, fan-mask.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error,
4 I/O error. Progress goes to stderr; summaries to stdout; machine-parsable
records only in files.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import data, evaluation, gradcheck, phantom, trainer
from .errors import ScgError, UsageError


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; route through the usage-error branch instead.
    def error(self, message):
        raise UsageError(message)


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise UsageError(f"--size must look like HxW (e.g. 64x64), got {text!r}")
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise UsageError(f"--size must be integer HxW, got {text!r}") from exc
    if h < 32 or w < 32 or h % 8 or w % 8:
        raise UsageError(f"size {h}x{w} must be >= 32 and divisible by 8")
    return h, w


def _apply_thread_cap():
    raw = os.environ.get("SCG_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SCG_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise UsageError(f"SCG_THREADS must be >= 0, got {n}")
    if n > 0:
        import torch

        torch.set_num_threads(n)
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", parents=[], help="synthesize a phantom dataset")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n-ct", type=int, required=True)
    g.add_argument("--n-us", type=int, required=True)
    g.add_argument("--size", required=True, help="canvas HxW, sides divisible by 8")
    g.add_argument("--paired", action="store_true", help="reuse CT scenes for the US domain")

    t = sub.add_parser("train", help="train the translation networks")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--lr", type=float, default=2e-4)
    t.add_argument("--decay-start", type=int, default=100)
    t.add_argument("--lambda-cycle", type=float, default=10.0)
    t.add_argument("--lambda-seg", type=float, default=0.5)
    t.add_argument("--gan-mode", choices=list(trainer.losses.GAN_MODES), default="non_saturating")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--pretrain-seg-epochs", type=int, default=0)
    t.add_argument("--checkpoint-every", type=int, default=0)

    tr = sub.add_parser("translate", help="translate a dataset's source domain")
    ev = sub.add_parser("eval", help="translate and score semantic consistency")
    for q in (tr, ev):
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--direction", choices=list(evaluation.DIRECTIONS), required=True)
        q.add_argument("--out", required=True)
        q.add_argument("--allow-unlabeled", action="store_true")
    ev.add_argument("--report", required=True)

    gc = sub.add_parser("grad-check", help="finite-difference gradient verification")
    gc.add_argument("--precision", choices=["double", "single"], default="double")
    gc.add_argument("--tolerance", type=float, default=None)

    f = sub.add_parser("fan-mask", help="apply the fan-sector footprint to an image")
    f.add_argument("--in", dest="input", required=True, metavar="FILE")
    f.add_argument("--out", required=True, metavar="FILE")
    f.add_argument("--aperture-deg", type=float, default=35.0)
    f.add_argument("--rmin-frac", type=float, default=0.05)
    f.add_argument("--rmax-frac", type=float, default=0.95)
    return p


def cmd_phantom_gen(args) -> int:
    h, w = _parse_size(args.size)
    manifest = phantom.build_phantom_dataset(
        seed=args.seed,
        n_ct=args.n_ct,
        n_us=args.n_us,
        canvas=(h, w),
        out_dir=args.out,
        paired=args.paired,
    )
    print(
        f"wrote {manifest.counts[data.CT]} CT + {manifest.counts[data.US]} US samples "
        f"({h}x{w}, {manifest.classes} classes, seed {manifest.seed}) to {args.out}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = trainer.TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        decay_start_epoch=args.decay_start,
        weights=trainer.losses.LossWeights(args.lambda_cycle, args.lambda_seg),
        gan_mode=args.gan_mode,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
    )
    print(
        f"config: epochs={cfg.epochs} lr={cfg.lr} decay_start={cfg.decay_start_epoch} "
        f"lambda_cycle={cfg.weights.lambda_cycle} lambda_seg={cfg.weights.lambda_seg} "
        f"gan_mode={cfg.gan_mode} seed={cfg.seed}"
    )
    dataset = data.load_dataset(args.data)
    nets = trainer.build_networks(cfg)
    if args.pretrain_seg_epochs > 0:
        print(f"pre-training segmentors for {args.pretrain_seg_epochs} epochs", file=sys.stderr)
        _, _, metrics = trainer.pretrain_segmentors(
            dataset, cfg, args.pretrain_seg_epochs, nets=nets,
            progress=lambda d, e, l: print(f"  pretrain {d} epoch {e}: loss {l:.4f}", file=sys.stderr),
        )
        for dom in data.DOMAINS:
            print(
                f"pretrain {dom}: held-out mean foreground dice "
                f"{metrics[dom]['mean_foreground_dice']:.4f}"
            )
    result = trainer.train(
        dataset, cfg, args.out, nets=nets,
        progress=lambda e, r: print(
            f"epoch {e}/{cfg.epochs} G={r.loss_G_total:.4f} cycle={r.loss_cycle:.4f}",
            file=sys.stderr,
        ),
    )
    print(f"final checkpoint: {result.checkpoint_dir}")
    print(f"training log: {result.log_path}")
    return 0


def _load_for_inference(args):
    bundle = trainer.load_checkpoint(args.checkpoint)
    dataset = data.load_dataset(args.data)
    source = data.CT if args.direction == "ct2us" else data.US
    samples = list(dataset.samples(source))
    return bundle, dataset, samples


def cmd_translate(args) -> int:
    bundle, _, samples = _load_for_inference(args)
    images = evaluation.translate(bundle, args.direction, samples, args.allow_unlabeled)
    paths = evaluation.write_translations(args.out, args.direction, [s.id for s in samples], images)
    print(f"wrote {len(paths)} translated images to {os.path.dirname(paths[0])}")
    return 0


def cmd_eval(args) -> int:
    bundle, dataset, samples = _load_for_inference(args)
    images = evaluation.translate(bundle, args.direction, samples, args.allow_unlabeled)
    evaluation.write_translations(args.out, args.direction, [s.id for s in samples], images)
    report = evaluation.semantic_consistency(bundle, dataset, args.direction)
    evaluation.export_report(report, args.report)
    print(
        f"semantic consistency ({args.direction}): mean foreground dice "
        f"{report.mean_foreground_dice:.6f} over {report.n_samples} samples"
    )
    print(f"report: {args.report}")
    return 0


def cmd_grad_check(args) -> int:
    results = gradcheck.run_gradcheck(precision=args.precision, tolerance=args.tolerance)
    ok = True
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(
            f"{r.name}: max relative error {r.max_rel_err:.3e} over {r.n_params} "
            f"parameters (tolerance {r.tolerance:g}) {status}"
        )
        ok = ok and r.passed
    if not ok:
        print("gradient check failed", file=sys.stderr)
        return 3
    return 0


def cmd_fan_mask(args) -> int:
    img = data.load_image(args.input)
    h, w = img.shape[:2]
    if not (0 < args.aperture_deg < 90):
        raise UsageError(f"--aperture-deg must be in (0, 90), got {args.aperture_deg}")
    fan = data.FanGeometry(
        apex=(0.0, w / 2.0),
        half_aperture=args.aperture_deg * 3.141592653589793 / 180.0,
        r_min=args.rmin_frac * h,
        r_max=args.rmax_frac * h,
    )
    data.save_image(data.apply_fan_mask(img, fan), args.out)
    print(f"wrote fan-masked image to {args.out}")
    return 0


_COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "train": cmd_train,
    "translate": cmd_translate,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "fan-mask": cmd_fan_mask,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_thread_cap()
        return _COMMANDS[args.command](args)
    except ScgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
