"""Command line: synth, train, infer, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data or contract error.

Run directory layout (``--out``)::

    corpus/                      scenes/, images/, density/, manifest.csv
    models/gce/                  bundle.cpnw, losses.csv
    models/lce/                  bundle.cpnw, losses.csv
    models/<configuration>/      bundle.cpnw, losses.csv
    reports/                     eval.csv, eval.png
    infer/                       <image>.cpdm, <image>.pgm
"""

from __future__ import annotations

import argparse
import csv
import shutil
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcheck, stages
from .config import ConfigError, RunConfig, load_config
from .context import CLASS_NAMES, Classifier, make_gce, make_lce
from .density import FormatError, save_density
from .metrics import EvalReport, evaluate
from .pipeline import (ABLATION_LADDER, AblationConfig, infer, load_bundle, load_state, save_bundle,
                       state_of, upsample_count_preserving)
from .synth import read_corpus, read_pgm, write_corpus, write_pgm

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class CliError(Exception):
    """Data or contract problem reported to the operator (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- paths


class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root).resolve()
        self.corpus = self.root / "corpus"
        self.models = self.root / "models"
        self.reports = self.root / "reports"
        self.infer = self.root / "infer"

    def stage(self, name: str) -> Path:
        return self.models / name

    def bundle(self, name: str) -> Path:
        return self.stage(name) / "bundle.cpnw"


def generator_stage(abl: AblationConfig) -> str:
    return abl.name


def _fresh_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise CliError(f"{path} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


class LossLog:
    """``epoch,loss`` CSV, one row appended and flushed per finished epoch."""

    def __init__(self, path: Path):
        self.path = path
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(("epoch", "loss"))

    def __call__(self, epoch: int, loss: float) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow((epoch + 1, f"{loss:.8g}"))


# ---------------------------------------------------------------- model loading


def _load_classifier(run: RunDir, cfg: RunConfig, kind: str) -> Classifier:
    path = run.bundle(kind)
    if not path.exists():
        raise CliError(f"missing {kind} model {path}; run `train --stage {kind}` first")
    model = make_gce(cfg.gce_size, frozen_prefix=cfg.gce_frozen_prefix) if kind == "gce" else make_lce(cfg.patch)
    load_state(model, load_bundle(path))
    model.freeze_all()
    return model


def _load_generator(run: RunDir, cfg: RunConfig, row: int):
    abl = cfg.ablation_config(row)
    path = run.bundle(generator_stage(abl))
    if not path.exists():
        raise CliError(f"missing {abl.name} model {path}; run `train --stage full --ablation {row}` first")
    generator = stages.make_generator(cfg, row)
    load_state(generator, load_bundle(path))
    gce = _load_classifier(run, cfg, "gce") if abl.use_gce else None
    lce = _load_classifier(run, cfg, "lce") if abl.use_lce else None
    return generator, gce, lce


def _split(run: RunDir, cfg: RunConfig, which: str):
    if not (run.corpus / "manifest.csv").exists():
        raise CliError(f"no corpus at {run.corpus}; run `synth` first")
    train, test = read_corpus(run.corpus).split(cfg.train_fraction)
    return train if which == "train" else test


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, run: RunDir, args) -> int:
    _fresh_dir(run.corpus, args.force)
    corpus = stages.synthesize(cfg)
    write_corpus(run.corpus, corpus.scenes, corpus.images, corpus.maps, corpus.classes)
    per_class = np.bincount(np.asarray(corpus.classes, dtype=int), minlength=len(CLASS_NAMES))
    print(f"wrote {len(corpus.ids)} scenes to {run.corpus}")
    for name, n in zip(CLASS_NAMES, per_class):
        print(f"class {name}: {n}")
    return EXIT_OK


def _train_classifier_stage(cfg: RunConfig, run: RunDir, kind: str, force: bool) -> None:
    out = run.stage(kind)
    _fresh_dir(out, force)
    train = _split(run, cfg, "train")
    log = LossLog(out / "losses.csv")
    result = (stages.train_gce if kind == "gce" else stages.train_lce)(cfg, train, log)
    save_bundle(out / "bundle.cpnw", state_of(result.model))
    print(f"{kind}: {len(result.losses)} epochs, final loss {result.losses[-1] if result.losses else float('nan'):.4f}, "
          f"train accuracy {result.train_accuracy:.3f}")


def _train_generator_stage(cfg: RunConfig, run: RunDir, row: int, force: bool) -> None:
    abl = cfg.ablation_config(row)
    needed = [k for k, use in (("gce", abl.use_gce), ("lce", abl.use_lce)) if use]
    missing = [k for k in needed if not run.bundle(k).exists()]
    if missing:
        raise CliError(f"stage full ({abl.name}) needs trained {' and '.join(missing)}; "
                       f"run `train --stage {missing[0]}` first")
    gce = _load_classifier(run, cfg, "gce") if abl.use_gce else None
    lce = _load_classifier(run, cfg, "lce") if abl.use_lce else None
    before = state_of(*(m for m in (gce, lce) if m is not None))
    out = run.stage(generator_stage(abl))
    _fresh_dir(out, force)
    train = _split(run, cfg, "train")
    generator, discriminator, history = stages.train_generator(cfg, train, gce, lce, row, LossLog(out / "losses.csv"))
    after = state_of(*(m for m in (gce, lce) if m is not None))
    if any(not np.array_equal(before[k], after[k]) for k in before):
        raise CliError("context estimator weights changed during end-to-end training")
    models = [generator] + ([discriminator] if discriminator is not None else [])
    save_bundle(out / "bundle.cpnw", state_of(*models))
    print(f"{abl.name}: {len(history.euclidean)} epochs, final L_E {history.euclidean[-1] if history.euclidean else float('nan'):.4f}")


def cmd_train(cfg: RunConfig, run: RunDir, args) -> int:
    if args.stage in ("gce", "lce"):
        _train_classifier_stage(cfg, run, args.stage, args.force)
        return EXIT_OK
    rows = range(1, len(ABLATION_LADDER) + 1) if args.all else [cfg.ablation]
    for row in rows:
        _train_generator_stage(cfg, run, row, args.force)
    return EXIT_OK


def cmd_infer(cfg: RunConfig, run: RunDir, args) -> int:
    image_path = Path(args.image)
    try:
        image = read_pgm(image_path)
    except OSError as exc:
        raise CliError(f"cannot read {image_path}: {exc.strerror}") from None
    h, w = image.shape
    if h % 4 or w % 4:
        raise CliError(f"image {w}x{h}: width and height must both be divisible by 4")
    generator, gce, lce = _load_generator(run, cfg, cfg.ablation)
    density, _ = infer(image, gce, lce, generator, lce_window=cfg.patch, target_scale=cfg.target_scale)
    density = upsample_count_preserving(density, 4 // generator.upscale)
    run.infer.mkdir(parents=True, exist_ok=True)
    stem = run.infer / image_path.stem
    save_density(stem.with_suffix(".cpdm"), density)
    peak = float(density.max())
    write_pgm(stem.with_suffix(".pgm"), density / peak if peak > 0 else density)
    print(f"count={float(density.sum(dtype=np.float64)):.2f}")
    return EXIT_OK


EVAL_HEADER = ("config",) + EvalReport.CSV_HEADER + ("error",)


def cmd_eval(cfg: RunConfig, run: RunDir, args) -> int:
    from .plotting import save_eval_figure

    corpus = _split(run, cfg, args.split)
    rows = range(1, len(ABLATION_LADDER) + 1) if args.ablation else [cfg.ablation]
    table, reports, examples, failed = [], {}, {}, False
    for row in rows:
        name = cfg.ablation_config(row).name
        try:
            generator, gce, lce = _load_generator(run, cfg, row)
        except (CliError, FormatError) as exc:
            print(f"error: {name}: {exc}", file=sys.stderr)
            table.append([name] + [""] * len(EvalReport.CSV_HEADER) + [str(exc)])
            failed = True
            continue
        maps = stages.predict_maps(cfg, corpus, generator, gce, lce)
        report = evaluate(corpus.maps, maps)
        reports[name] = report
        examples[name] = maps[0]
        table.append([name] + report.row() + [""])
    run.reports.mkdir(parents=True, exist_ok=True)
    csv_path = run.reports / "eval.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        w.writerows(table)
    sys.stdout.write(csv_path.read_text(encoding="utf-8"))
    if reports:
        save_eval_figure(run.reports / "eval.png", reports, corpus.images[0], corpus.maps[0], examples)
    return EXIT_DATA if failed else EXIT_OK


def cmd_gradcheck(cfg: RunConfig, run: RunDir, args) -> int:
    results = gradcheck.run_all(cfg.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_error={r.max_rel_error:.3e}  tol={r.tolerance:.0e}  "
              f"{r.seconds:6.2f}s  {status}")
    ok = all(r.passed for r in results)
    print("all checks passed" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_DATA


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS,
                        help="key = value run configuration file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="run seed")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="run directory (default: run)")
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS,
                        help="overwrite existing outputs")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=argparse.SUPPRESS,
                        help="override one config value (repeatable)")

    parser = _Parser(prog="cpcnn", parents=[common],
                     description="Context-aware crowd density estimation on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--n", type=int, help="number of scenes (config: n_scenes)")

    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("--stage", choices=("gce", "lce", "full"), required=True)
    p.add_argument("--ablation", type=int, choices=range(1, len(ABLATION_LADDER) + 1),
                   help="configuration row for --stage full (default: config value, 4)")
    p.add_argument("--all", action="store_true", help="with --stage full: train every configuration row")

    p = sub.add_parser("infer", parents=[common], help="density map and count for one PGM image")
    p.add_argument("image")
    p.add_argument("--ablation", type=int, choices=range(1, len(ABLATION_LADDER) + 1))

    p = sub.add_parser("eval", parents=[common], help="evaluate trained configurations")
    p.add_argument("--ablation", action="store_true", help="evaluate all four configuration rows")
    p.add_argument("--split", choices=("test", "train"), default="test")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every backward pass")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def _overrides(args) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        out["seed"] = str(args.seed)
    if getattr(args, "n", None) is not None:
        out["n_scenes"] = str(args.n)
    if args.command in ("train", "infer") and getattr(args, "ablation", None) is not None:
        out["ablation"] = str(args.ablation)
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.force = getattr(args, "force", False)
    if args.command == "train" and args.all and args.stage != "full":
        parser.error("--all only applies to --stage full")
    try:
        cfg = load_config(getattr(args, "config", None), **_overrides(args))
        run = RunDir(getattr(args, "out", "run"))
        return COMMANDS[args.command](cfg, run, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
    except (CliError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
