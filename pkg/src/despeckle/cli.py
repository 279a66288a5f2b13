"""Command-line entry point: ``despeckle <command> [--config FILE] [--set key=value ...]``.

Commands: ``phantom``, ``prepare``, ``train``, ``denoise``, ``evaluate``, ``ablate``.

Exit codes:

====  ==========================================
0     success
1     unexpected error
2     configuration / usage error
3     missing input
4     dimension / shape error
5     numeric error (non-finite loss)
6     undefined metric where a value was required
====  ==========================================

Failures print exactly one line to stderr: ``error[<category>]: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import DespeckleError, MissingInputError

log = logging.getLogger("despeckle")

EXIT_CODES = {"config": 2, "missing-input": 3, "dimension": 4, "numeric": 5, "undefined-metric": 6}
COMMANDS = ("phantom", "prepare", "train", "denoise", "evaluate", "ablate")


def write_provenance(out: Path, command: str, cfg: ExperimentConfig, extra: dict | None = None) -> Path:
    import torch

    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "config": cfg.to_flat(),
        "seed": cfg.seed,
        "versions": {"despeckle": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "torch": torch.__version__},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        record.update(extra)
    path = out / "run.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _header(cfg: ExperimentConfig) -> str:
    return "# config: " + json.dumps(cfg.to_flat(), sort_keys=True) + "\n"


# -- commands ------------------------------------------------------------------

def cmd_phantom(cfg: ExperimentConfig, args) -> int:
    from .experiment import make_phantom_data, write_phantom_data

    out = Path(args.out) if args.out else cfg.output_path() / "phantom"
    data = make_phantom_data(cfg.phantom_config(), cfg.phantom.n_train, cfg.phantom.n_test, cfg.seed)
    write_phantom_data(data, out)
    write_provenance(out, "phantom", cfg)
    print(f"wrote {len(data.clean)} phantom pairs to {out}")
    return 0


def _patchset_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.data.patchset_dir) if cfg.data.patchset_dir else cfg.output_path() / "patches"


def cmd_prepare(cfg: ExperimentConfig, args) -> int:
    from .dataset_prep import prepare_from_dirs

    d = cfg.data
    if not d.noisy_dir or not d.clean_dir:
        raise MissingInputError("prepare needs data.noisy_dir and data.clean_dir")
    out = _patchset_dir(cfg)
    ps = prepare_from_dirs(d.noisy_dir, d.clean_dir, d.boundary_manifest or None, out,
                           patch_size=d.patch_size, stride=d.stride, noise_stride=d.noise_stride,
                           crop_h=d.crop_h, crop_w=d.crop_w, train_ids=d.train_ids, split=d.split,
                           workers=d.workers, min_std=d.min_patch_std)
    write_provenance(out, "prepare", cfg, {"manifest_sha256": ps.manifest_hash()})
    for w in ps.warnings:
        log.warning(w)
    print(f"patches: noisy={len(ps.noisy_patches)} clean={len(ps.clean_patches)} "
          f"noise={len(ps.noise_patches)} -> {out}")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    from .dataset_prep import PatchSet
    from .plotting import plot_training_log
    from .trainer import Trainer

    ps = PatchSet.load(_patchset_dir(cfg))
    out = cfg.output_path() / "train"
    tc = cfg.train_config()
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, epochs=tc.epochs)
    else:
        trainer = Trainer(tc)
    write_provenance(out, "train", cfg, {"resume": args.resume})
    steps = trainer.steps_per_epoch(ps)

    def progress(tr, rep):
        if tr.global_step % max(1, steps // 4) == 0:
            log.info("epoch %d step %d total_G %.4f total_D %.4f", tr.epoch, tr.global_step, rep.total_g, rep.total_d)

    trainer.train(ps, out_dir=out, progress=progress, provenance=cfg.to_flat())
    if (out / "train_log.tsv").exists():
        plot_training_log(out / "train_log.tsv", out / "loss_curves.png")
    print(f"trained {trainer.global_step} steps -> {out / 'checkpoint_final.pt'}")
    return 0


def cmd_denoise(cfg: ExperimentConfig, args) -> int:
    from .dataset_prep import list_images, read_image, write_image
    from .denoiser import denoise_image, extract_noise_estimate, load_denoiser, residual_to_gray

    ckpt = args.checkpoint or cfg.eval.checkpoint
    if not ckpt:
        raise MissingInputError("denoise needs --checkpoint (or eval.checkpoint)")
    if not Path(ckpt).exists():
        raise MissingInputError(f"checkpoint not found: {ckpt}")
    src = Path(args.input or cfg.eval.noisy_dir)
    if not str(src) or not src.exists():
        raise MissingInputError(f"denoise input not found: {src}")
    files = [src] if src.is_file() else list_images(src)
    out = Path(args.output) if args.output else cfg.output_path() / "denoised"
    nets = load_denoiser(ckpt)
    for f in files:
        img = read_image(f)
        den = denoise_image(nets, img)
        write_image(out / f"{f.stem}.png", den)
        if args.residual:
            write_image(out / "residual" / f"{f.stem}.png", residual_to_gray(extract_noise_estimate(img, den)))
    write_provenance(out, "denoise", cfg, {"checkpoint": str(ckpt), "inputs": [str(f) for f in files]})
    print(f"denoised {len(files)} image(s) -> {out}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    from .baselines import BUILTIN_FILTERS, ResultRegistry
    from .dataset_prep import list_images, read_image
    from .denoiser import denoise_image, load_denoiser
    from .metrics import METRIC_COLUMNS, evaluate_set, read_roi_config
    from .plotting import plot_metric_table

    e = cfg.eval
    expected = ["eval.noisy_dir (test noisy images)", "eval.roi_config (ROI file)",
                "eval.results_dir/<method>/<image_id>.png and/or eval.checkpoint"]
    if not e.noisy_dir or not Path(e.noisy_dir).is_dir() or not e.roi_config or not Path(e.roi_config).exists():
        raise MissingInputError("evaluate needs: " + "; ".join(expected))
    noisy = {p.stem: read_image(p) for p in list_images(e.noisy_dir)}
    rois = read_roi_config(e.roi_config)
    reg = ResultRegistry(noisy.keys())
    if e.results_dir:
        reg.ingest_results_root(e.results_dir)
    if e.checkpoint:
        nets = load_denoiser(e.checkpoint)
        reg.register(e.method_name, {k: denoise_image(nets, v) for k, v in noisy.items()})
    if not reg.methods:
        raise MissingInputError("no results to evaluate; expected " + "; ".join(expected))
    for name in e.baselines:
        if name not in BUILTIN_FILTERS:
            raise DespeckleError(f"unknown built-in baseline {name!r}")
        reg.register(name, {k: BUILTIN_FILTERS[name](v) for k, v in noisy.items()})
    reg.register("noisy", noisy)

    out = cfg.output_path() / "evaluate"
    out.mkdir(parents=True, exist_ok=True)
    lines, means = [], {}
    for method, images in reg.methods.items():
        rep = evaluate_set(images, noisy, rois)
        means[method] = rep.means
        for r in rep.rows:
            lines.append("\t".join([method, r.image_id] + [_fmt(r.value(c)) for c in METRIC_COLUMNS]))
        lines.append("\t".join([method, "mean"] + [_fmt(rep.means[c]) for c in METRIC_COLUMNS]))
        if any(rep.undefined_counts.values()):
            log.warning("%s: undefined metric entries %s", method, rep.undefined_counts)
    table = _header(cfg) + "\t".join(("method", "image_id") + METRIC_COLUMNS) + "\n" + "\n".join(lines) + "\n"
    (out / "report.tsv").write_text(table, encoding="utf-8")
    plot_metric_table(means, out / "report.png", "mean metrics per method")
    write_provenance(out, "evaluate", cfg, {"methods": list(reg.methods)})
    print(f"evaluated {len(reg.methods)} method(s) on {len(noisy)} image(s) -> {out / 'report.tsv'}")
    return 0


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    from .experiment import ABLATION_COLUMNS, ablate, format_table, make_phantom_data
    from .plotting import plot_metric_table

    d = cfg.data
    data = make_phantom_data(cfg.phantom_config(), cfg.phantom.n_train, cfg.phantom.n_test, cfg.seed)
    out = cfg.output_path() / "ablate"
    write_provenance(out, "ablate", cfg)
    table = ablate(data, cfg.train_config(), d.patch_size, d.stride, d.noise_stride, out_dir=out)
    (out / "ablation.tsv").write_text(_header(cfg) + format_table(table, ABLATION_COLUMNS), encoding="utf-8")
    plot_metric_table(table, out / "ablation.png", "noise-constraint ablation")
    print(format_table(table, ABLATION_COLUMNS), end="")
    return 0


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.6g}"


HANDLERS = {"phantom": cmd_phantom, "prepare": cmd_prepare, "train": cmd_train,
            "denoise": cmd_denoise, "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="despeckle", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="flat key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "phantom":
            p.add_argument("--out", help="output directory (default: <output_dir>/phantom)")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to resume from")
        if name == "denoise":
            p.add_argument("--input", "-i", help="image file or directory")
            p.add_argument("--checkpoint", help="trained checkpoint")
            p.add_argument("--output", "-o", help="output directory")
            p.add_argument("--residual", action="store_true", help="also write residual (noise) images")
    return parser


def run(command: str, config_file=None, overrides=(), args=None) -> int:
    """Run one command; returns the process exit status."""
    try:
        cfg = load_config(config_file, overrides)
        if args is None:
            args = build_parser().parse_args([command])
        return HANDLERS[command](cfg, args)
    except DespeckleError as exc:
        print(f"error[{exc.category}]: {_one_line(exc)}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except (FileNotFoundError, ValueError) as exc:
        category = "missing-input" if isinstance(exc, FileNotFoundError) else "config"
        print(f"error[{category}]: {_one_line(exc)}", file=sys.stderr)
        return EXIT_CODES[category]


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return run(args.command, args.config, args.overrides, args)


if __name__ == "__main__":
    sys.exit(main())
