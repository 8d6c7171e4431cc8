"""Command-line front end: one subcommand per pipeline stage.

Exit codes: 0 success, 1 internal failure, 2 configuration or usage error, 3 missing
prerequisite, 4 numerical failure, 5 I/O failure.  Failures print a single
``error category=<name> message=<text>`` line on stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import checkpoint as ckpt
from . import data as D
from . import evalkit
from . import training as T
from .config import ConfigError, RunConfig, parse_config
from .models import build_network
from .netpbm import ImageFormatError
from .tensor import NonFiniteError, Tensor, no_grad

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4, 5



class UsageError(ValueError):
    """A command-line argument is inconsistent with the data or checkpoint."""


def _stage_dir(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.run.out_dir) / name


def _default_ckpt(cfg: RunConfig, stage: str, given: Optional[str]) -> Path:
    return Path(given) if given else _stage_dir(cfg, stage) / T.FINAL


def cmd_gen_data(cfg: RunConfig, args) -> int:
    manifests = D.generate(cfg.dataset_spec(), cfg.data.root)
    for split, path in manifests.items():
        print(f"{split} manifest={path}")
    return EXIT_OK


def _report(result: T.StageResult) -> None:
    print(f"checkpoint={result.checkpoint}")
    print(f"metrics={result.metrics}")
    if result.val_miou is not None:
        print(f"val_miou={result.val_miou:.6f}")


def cmd_train_teacher(cfg, args) -> int:
    _report(T.train_teacher(cfg, args.run_dir or _stage_dir(cfg, "teacher"), resume=not args.fresh))
    return EXIT_OK


def cmd_train_ae(cfg, args) -> int:
    teacher = _default_ckpt(cfg, "teacher", args.teacher)
    result = T.train_autoencoder(cfg, teacher, args.run_dir or _stage_dir(cfg, "translator"),
                                 resume=not args.fresh)
    _report(result)
    return EXIT_OK


def _student(cfg, args, mode: str) -> int:
    teacher = _default_ckpt(cfg, "teacher", args.teacher)
    ae = _default_ckpt(cfg, "translator", args.translator)
    name = "student" if mode == "distill" else f"student-{mode}"
    result = T.distill_student(cfg, teacher, ae, args.run_dir or _stage_dir(cfg, name),
                               mode=mode, resume=not args.fresh)
    _report(result)
    return EXIT_OK


def cmd_distill(cfg, args) -> int:
    return _student(cfg, args, "distill")


def cmd_baseline(cfg, args) -> int:
    return _student(cfg, args, args.mode)


def _segmenter(path, num_classes):
    try:
        return T.load_segmenter(path, num_classes)
    except ckpt.CheckpointError:
        raise
    except ValueError as exc:  # class-count mismatch
        raise UsageError(str(exc)) from None


def cmd_eval(cfg, args) -> int:
    split = T.load_split(cfg, args.split)
    net = _segmenter(args.checkpoint, split.num_classes)
    report = evalkit.evaluate(net, split)
    text = "\n".join(report.lines()) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_affinity_map(cfg, args) -> int:
    split = T.load_split(cfg, args.split)
    if not 0 <= args.index < len(split):
        raise UsageError(f"sample index {args.index} outside [0, {len(split)})")
    net = _segmenter(args.checkpoint, split.num_classes)
    image = split.images[args.index : args.index + 1]
    with no_grad():
        feats = net(Tensor(image)).features
    try:
        out = evalkit.affinity_map(feats, (args.row, args.col), image.shape[2:], args.output)
    except IndexError as exc:
        raise UsageError(str(exc)) from None
    print(f"affinity_map={args.output} grid={feats.shape[2]}x{feats.shape[3]} max={int(out.max())}")
    return EXIT_OK


def cmd_flops(cfg, args) -> int:
    arch = args.arch
    stride = args.os
    if stride is None and arch in ("teacher", "student"):
        stride = getattr(cfg, arch).output_stride
    net = build_network(arch, stride, cfg.data.num_classes)
    size = args.size or cfg.data.image_size
    shape = (size, size)
    if arch == "translator":
        report = evalkit.count_flops(net, shape, in_channels=net.channels)
    elif arch in ("adapter", "projection"):
        report = evalkit.count_flops(net, shape, in_channels=32)
    else:
        report = evalkit.count_flops(net, shape)
    for line in report.lines():
        print(line)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kaseg", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file of 'section.key = value' lines")
    common.add_argument("--override", nargs="*", default=[], metavar="KEY=VALUE",
                        help="config overrides, applied after the file")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset")

    def stage(name, helptext):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--run-dir", help="output directory (default: run.out_dir/<stage>)")
        p.add_argument("--fresh", action="store_true", help="ignore an existing last.ckpt")
        return p

    stage("train-teacher", "train the teacher with cross entropy")
    p = stage("train-ae", "pre-train the translator on frozen teacher features")
    p.add_argument("--teacher", help="teacher checkpoint")
    for name, helptext in (("distill", "train the student with both distillation losses"),
                           ("baseline", "train the student under a comparison baseline")):
        p = stage(name, helptext)
        p.add_argument("--teacher", help="teacher checkpoint")
        p.add_argument("--translator", help="translator checkpoint")
        if name == "baseline":
            p.add_argument("mode", choices=["plain", "affinity_only", "kd", "fitnet"])

    p = sub.add_parser("eval", parents=[common], help="mIoU of a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--output", help="also write the report here")

    p = sub.add_parser("affinity-map", parents=[common], help="export one point's affinity map")
    p.add_argument("checkpoint")
    p.add_argument("--index", type=int, default=0, help="sample index in the split")
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--row", type=int, required=True)
    p.add_argument("--col", type=int, required=True)
    p.add_argument("--output", required=True, help="PGM path")

    p = sub.add_parser("flops", parents=[common], help="analytical MAC/FLOP count")
    p.add_argument("--arch", default="student",
                   choices=["teacher", "student", "translator", "adapter", "projection"])
    p.add_argument("--os", type=int, help="output stride (segmenters only)")
    p.add_argument("--size", type=int, help="input side length")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "train-ae": cmd_train_ae,
    "distill": cmd_distill,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "affinity-map": cmd_affinity_map,
    "flops": cmd_flops,
}


def _fail(code: int, category: str, exc: BaseException) -> int:
    message = " ".join(str(exc).split())
    print(f"error category={category} message={message}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, args.override)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except UsageError as exc:
        return _fail(EXIT_CONFIG, "usage", exc)
    except ckpt.ConfigMismatchError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing", exc)
    except (T.TrainingError, NonFiniteError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except (OSError, D.DataError, ImageFormatError, ckpt.CheckpointError) as exc:
        return _fail(EXIT_IO, "io", exc)
    except Exception as exc:  # anything else is a bug or a bad argument combination
        return _fail(EXIT_INTERNAL, "internal", exc)


if __name__ == "__main__":
    sys.exit(main())
