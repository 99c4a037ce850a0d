"""Command-line entry point: ``jointfuse {fuse,train,evaluate,ablate,synth}``.

Run outputs go to ``--out-dir`` when given, else ``$JOINTFUSE_OUTPUT_DIR``,
else ``runs/<command>``.
"""
import argparse
import logging
import sys
from pathlib import Path

from .config import TrainConfig, load_config
from .data import DatasetManifest, find_image, load_pair, save_image, output_dir
from .errors import ConfigError, FormatError, ValidationError, AnnotationParseError
from .metrics import evaluate_directory


def _manifest(path):
    m = DatasetManifest.from_path(path)
    if len(m) == 0:
        raise ValidationError(f"no image pairs under {path}")
    return m


def _config(path):
    return load_config(path) if path else TrainConfig()


def _out_dir(args, command):
    return Path(args.out_dir) if args.out_dir else output_dir(Path("runs") / command)


def cmd_fuse(args):
    from .trainer import fuse_pair, load_model
    model, _, _ = load_model(args.ckpt)
    ir, vis, out = Path(args.ir), Path(args.vis), Path(args.out)
    if ir.is_dir():
        out.mkdir(parents=True, exist_ok=True)
        jobs = []
        for path in sorted(p for p in ir.iterdir() if p.is_file()):
            partner = find_image(vis, path.stem)
            if partner is None:
                logging.warning("no visible image for %s, skipped", path.stem)
                continue
            jobs.append((path, partner, out / f"{path.stem}.png"))
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        jobs = [(ir, vis, out)]
    for ir_path, vis_path, dest in jobs:
        _, rgb = fuse_pair(model, load_pair(ir_path, vis_path))
        save_image(dest, rgb)
        print(dest)
    return 0


def cmd_train(args):
    from .trainer import run_training
    cfg = _config(args.config)
    out = _out_dir(args, "train")
    result = run_training(_manifest(args.manifest), cfg, out, resume=args.resume)
    print(f"loss log: {result.log_path}")
    print(f"best checkpoint: {result.best_path}")
    return 0


def cmd_evaluate(args):
    report = evaluate_directory(args.fused_dir, _manifest(args.manifest), method=args.method)
    out_csv = Path(args.out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_csv)
    print(report.table())
    for id_ in report.missing:
        print(f"missing fused image: {id_}")
    return 0


def cmd_ablate(args):
    from .trainer import run_ablation
    eval_manifest = _manifest(args.eval_manifest) if args.eval_manifest else None
    result = run_ablation(_manifest(args.manifest), _config(args.config), _out_dir(args, "ablation"),
                          eval_manifest=eval_manifest)
    print(result.table)
    return 0


def cmd_synth(args):
    from .synth import make_toy_dataset
    base = make_toy_dataset(args.root, args.split, args.pairs, args.size, args.seed)
    print(base)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="jointfuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fuse", help="fuse an infrared/visible pair (or two directories)")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--ir", required=True)
    f.add_argument("--vis", required=True)
    f.add_argument("--out", required=True, help="output image, or directory when --ir is one")
    f.set_defaults(func=cmd_fuse)

    t = sub.add_parser("train", help="train on a manifest directory <root>/<split>")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config")
    t.add_argument("--out-dir")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a directory of fused images")
    e.add_argument("--fused-dir", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out-csv", required=True)
    e.add_argument("--method", default="fused")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and score the five ablation variants")
    a.add_argument("--manifest", required=True)
    a.add_argument("--config")
    a.add_argument("--eval-manifest")
    a.add_argument("--out-dir")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("synth", help="write a synthetic toy manifest")
    s.add_argument("--root", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--pairs", type=int, default=4)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, ValidationError, AnnotationParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
