"""Command line entry point: ``angiosynth <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 selfcheck failure, 2 missing checkpoint or input,
3 config violation, 4 corrupt VVOL, 5 corrupt checkpoint, 64 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import pipeline
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, format_config, load_config
from .metrics import evaluate_volumes
from .plotting import save_loss_curves, save_mip_figure, write_pgm
from .selfcheck import run_all
from .volume import AXES, VolumeFormatError, VolumePair, load_volume, save_volume

EXIT_SELFCHECK = 1
EXIT_MISSING = 2
EXIT_CONFIG = 3
EXIT_VVOL = 4
EXIT_CHECKPOINT = 5
EXIT_USAGE = 64

CODEC_FILE = "codec.vtsd"
EMBEDDER_FILE = "embedder.vtsd"
DIFFUSION_FILE = "diffusion.vtsd"
REPORT_BEGIN = "=== report ==="
REPORT_END = "=== end report ==="


class MissingInputError(FileNotFoundError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(args, default) -> Path:
    out = Path(getattr(args, "out", None) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pair_paths(directory: Path):
    return sorted(directory.glob("pair_*_nonangio.vvol"))


def _load_pairs(directory: Path):
    paths = _pair_paths(directory)
    if not paths:
        raise MissingInputError(f"no phantom pairs (pair_*_nonangio.vvol) in {directory}")
    pairs = []
    for na in paths:
        stem = na.name[:-len("_nonangio.vvol")]
        files = [na, directory / f"{stem}_angio.vvol", directory / f"{stem}_mask.vvol"]
        for f in files[1:]:
            if not f.exists():
                raise MissingInputError(f"missing {f}")
        non_angio, angio, mask = (load_volume(f) for f in files)
        pairs.append(VolumePair(non_angio, angio, mask, []))
    return pairs


def _load(path: Path):
    if not path.exists():
        raise MissingInputError(f"missing checkpoint {path}")
    return load_checkpoint(path)


def _dump_slices(v, indices, axis, prefix: Path):
    depth = v.dims[AXES[axis]]
    for i in indices:
        if not 0 <= i < depth:
            raise ConfigError(f"slice index {i} outside [0, {depth})")
        img = v.voxels.take(i, axis=AXES[axis])
        write_pgm(img, f"{prefix}_{axis}{i:03d}.pgm")


def _parse_indices(text):
    if not text:
        return []
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --dump-slices list {text!r}") from exc


# ---------------------------------------------------------------- commands


def cmd_phantom(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg.data_dir)
    n = cfg.n_pairs if args.n is None else args.n
    if n < 1:
        raise ConfigError("--n must be >= 1")
    indices = _parse_indices(args.dump_slices)
    for i, pair in enumerate(pipeline.make_pairs(cfg, n)):
        stem = out / f"pair_{i:03d}"
        save_volume(pair.non_angio, f"{stem}_nonangio.vvol")
        save_volume(pair.angio, f"{stem}_angio.vvol")
        save_volume(pair.vessel_mask, f"{stem}_mask.vvol")
        if indices:
            _dump_slices(pair.non_angio, indices, cfg.axis, Path(f"{stem}_nonangio"))
            _dump_slices(pair.angio, indices, cfg.axis, Path(f"{stem}_angio"))
    print(f"wrote {n} phantom pairs to {out}")
    return 0


def cmd_train_codec(args) -> int:
    cfg = _config(args)
    pairs = _load_pairs(Path(args.data or cfg.data_dir))
    out = _out_dir(args, cfg.checkpoint_dir)
    hist = []
    codec = pipeline.run_codec(cfg, pairs, hist)
    tensors, scalars = pipeline.codec_entries(codec)
    save_checkpoint(out / CODEC_FILE, tensors, scalars, format_config(cfg))
    save_loss_curves({"codec mse": hist}, out / "codec_loss.png")
    print(f"codec: mse {hist[0] if hist else float('nan'):.6g} -> {hist[-1] if hist else float('nan'):.6g}")
    return 0


def cmd_train_embedder(args) -> int:
    cfg = _config(args)
    ckpt = Path(args.checkpoints or cfg.checkpoint_dir)
    codec = pipeline.codec_from(*_load(ckpt / CODEC_FILE)[:2])
    pairs = _load_pairs(Path(args.data or cfg.data_dir))
    out = _out_dir(args, cfg.checkpoint_dir)
    hist = []
    emb = pipeline.run_embedder(cfg, pairs, codec, hist)
    tensors, scalars = pipeline.embedder_entries(emb)
    save_checkpoint(out / EMBEDDER_FILE, tensors, scalars, format_config(cfg))
    save_loss_curves({"embedder loss": hist}, out / "embedder_loss.png")
    print(f"embedder: loss {hist[0]:.4f} -> {hist[-1]:.4f}" if hist else "embedder: 0 epochs")
    return 0


def cmd_train_diffusion(args) -> int:
    cfg = _config(args)
    ckpt = Path(args.checkpoints or cfg.checkpoint_dir)
    codec = pipeline.codec_from(*_load(ckpt / CODEC_FILE)[:2])
    emb = pipeline.embedder_from(*_load(ckpt / EMBEDDER_FILE)[:2])
    pairs = _load_pairs(Path(args.data or cfg.data_dir))
    out = _out_dir(args, cfg.checkpoint_dir)
    hist = []
    model = pipeline.run_diffusion(cfg, pairs, codec, emb, history=hist)
    tensors, scalars = pipeline.model_entries(model)
    save_checkpoint(out / DIFFUSION_FILE, tensors, scalars, format_config(cfg))
    save_loss_curves({"diffusion total loss": hist}, out / "diffusion_loss.png")
    print(f"diffusion: {len(hist)} steps")
    return 0


def _load_model(ckpt: Path, axis: str):
    codec = pipeline.codec_from(*_load(ckpt / CODEC_FILE)[:2])
    _load(ckpt / EMBEDDER_FILE)  # stage dependency; the tuned copy lives in the diffusion file
    tensors, scalars, _ = _load(ckpt / DIFFUSION_FILE)
    return pipeline.model_from(tensors, scalars, codec.shadow_params(), axis)


def cmd_synthesize(args) -> int:
    cfg = _config(args)
    ckpt = Path(args.checkpoints or cfg.checkpoint_dir)
    if not Path(args.input).exists():
        raise MissingInputError(f"missing input volume {args.input}")
    non_angio = load_volume(args.input)
    model = _load_model(ckpt, cfg.axis)
    synth = pipeline.synthesize(model, non_angio, cfg.seed)
    out = _out_dir(args, ".")
    target = out / (args.output or "synth.vvol")
    save_volume(synth, target)
    indices = _parse_indices(args.dump_slices)
    if indices:
        _dump_slices(synth, indices, cfg.axis, target.with_suffix(""))
    print(f"wrote {target}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    for p in (args.synth, args.truth, args.mask):
        if p and not Path(p).exists():
            raise MissingInputError(f"missing volume {p}")
    synth, truth = load_volume(args.synth), load_volume(args.truth)
    mask = load_volume(args.mask) if args.mask else None
    report = evaluate_volumes(synth, truth, mask, axis=cfg.axis)
    out = getattr(args, "out", None)
    report_path = Path(out) / Path(cfg.report_path).name if out else Path(cfg.report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    line = report.to_json()
    report_path.write_text(line + "\n", encoding="utf-8")
    figs = {"synthesized": synth, "reference": truth}
    if args.input:
        figs = {"input": load_volume(args.input), **figs}
    save_mip_figure(figs, report_path.with_suffix(".mip.png"))
    print(REPORT_BEGIN)
    print(line)
    print(REPORT_END)
    return 0


def cmd_selfcheck(args) -> int:
    seed = args.seed if getattr(args, "seed", None) is not None else 0
    results = list(run_all(seed))
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else EXIT_SELFCHECK


# ---------------------------------------------------------------- parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides the config seed")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="angiosynth", parents=[_common()],
                     description="Tree-scan latent diffusion for angiography synthesis on phantoms.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common()

    p = sub.add_parser("phantom", parents=[common], help="write phantom VolumePairs")
    p.add_argument("--n", type=int, default=None, help="number of pairs (default n_pairs)")
    p.add_argument("--dump-slices", default="", help="comma separated slice indices to dump as PGM")
    p.set_defaults(func=cmd_phantom)

    for name, fn in (("train-codec", cmd_train_codec), ("train-embedder", cmd_train_embedder),
                     ("train-diffusion", cmd_train_diffusion)):
        p = sub.add_parser(name, parents=[common], help=f"{name.split('-')[1]} stage")
        p.add_argument("--data", default=None, help="phantom directory (default data_dir)")
        p.add_argument("--checkpoints", default=None, help="checkpoint directory to read")
        p.set_defaults(func=fn)

    p = sub.add_parser("synthesize", parents=[common], help="angio volume from a non-angio VVOL")
    p.add_argument("input")
    p.add_argument("--checkpoints", default=None)
    p.add_argument("--output", default=None, help="file name inside --out (default synth.vvol)")
    p.add_argument("--dump-slices", default="")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", parents=[common], help="metric report for a synthesized VVOL")
    p.add_argument("synth")
    p.add_argument("truth")
    p.add_argument("--mask", default=None, help="ground-truth vessel mask VVOL")
    p.add_argument("--input", default=None, help="non-angio input, shown in the MIP figure")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selfcheck", parents=[common], help="oracle and gradient checks")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VolumeFormatError as exc:
        print(f"corrupt volume: {exc}", file=sys.stderr)
        return EXIT_VVOL
    except CheckpointError as exc:
        print(f"corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except MissingInputError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
