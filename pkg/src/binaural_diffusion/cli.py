"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 internal
invariant violation.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import plotting
from .audio_io import AudioClip, channel_average, duplicate_mono, read_pose_csv, read_wav, write_wav
from .config import PROFILES, load_config
from .dsp_render import (
    clip_id,
    dsp_render_binaural,
    load_hrtf_bank,
    make_synthetic_dataset,
    make_toy_hrtf_bank,
    read_manifest,
)
from .errors import BinauralError, ConfigError, DataError
from .metrics import evaluate_manifest
from .two_stage import StageModel, build_condition, check_stage, stage_spec, synthesize_stages, train_stage

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("binaural_diffusion")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _hrtf_bank(cfg, override=None):
    directory = override or cfg["data"]["hrtf_dir"]
    if directory:
        return load_hrtf_bank(directory)
    return make_toy_hrtf_bank(cfg["audio"]["sample_rate"])


def _read_inputs(cfg, mono_path, pose_path):
    x = read_wav(mono_path)
    if x.channels != 1:
        raise DataError(f"{mono_path}: expected a mono source, got {x.channels} channels")
    track = read_pose_csv(pose_path, ear_offsets=cfg.ear_offsets)
    return x, track


def cmd_make_data(cfg, args):
    d = cfg["data"]
    seed = d["seed"] if args.seed is None else args.seed
    n_clips = d["n_clips"] if args.n_clips is None else args.n_clips
    manifest = make_synthetic_dataset(seed, n_clips, d["clip_seconds"], cfg["audio"]["sample_rate"], cfg.room(),
                                      _hrtf_bank(cfg, args.hrtf_dir), args.out, cfg["audio"]["speed_of_sound"])
    print(manifest)


def cmd_train(cfg, args):
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    optim = cfg.optim()
    if args.steps is not None:
        optim = replace(optim, steps=args.steps)
    seed = cfg["train"]["seed"] if args.seed is None else args.seed
    log_path = args.log or Path(args.out).with_suffix(".loss.csv")
    history, *_ = train_stage(stage_spec(args.stage).stage, manifest, cfg.net_config(), cfg.train_schedule(), optim,
                              seed, args.out, log_path, cfg["audio"]["speed_of_sound"])
    if args.figures:
        plotting.plot_loss(history, Path(args.figures) / f"{Path(args.out).stem}_loss.png")
    print(args.out)


def _load_models(args):
    m1 = StageModel.load(args.stage1)
    m2 = StageModel.load(args.stage2)
    check_stage(m1, "common", f"--stage1 {args.stage1}")
    check_stage(m2, "specific", f"--stage2 {args.stage2}")
    return m1, m2


def cmd_synth(cfg, args):
    m1, m2 = _load_models(args)
    seed = cfg["synth"]["seed"] if args.seed is None else args.seed
    speed = cfg["audio"]["speed_of_sound"]
    if args.manifest:
        if not args.pred_dir:
            raise ConfigError("--manifest needs --pred-dir")
        out_dir = Path(args.pred_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for mono_path, pose_path, bin_path in read_manifest(args.manifest):
            x, track = _read_inputs(cfg, mono_path, pose_path)
            y_c, y = synthesize_stages(x, track, m1, m2, cfg.infer_betas, seed, speed)
            write_wav(y, out_dir / f"{clip_id(bin_path)}.wav", "float32")
            if args.stage1_dir:
                Path(args.stage1_dir).mkdir(parents=True, exist_ok=True)
                write_wav(y_c, Path(args.stage1_dir) / f"{clip_id(bin_path)}.wav", "float32")
        print(out_dir)
        return
    if not (args.mono and args.pose and args.out):
        raise ConfigError("synth needs --mono, --pose and --out (or --manifest with --pred-dir)")
    x, track = _read_inputs(cfg, args.mono, args.pose)
    y_c, y = synthesize_stages(x, track, m1, m2, cfg.infer_betas, seed, speed)
    write_wav(y, args.out, args.encoding)
    if args.stage1_out:
        write_wav(y_c, args.stage1_out, args.encoding)
    print(args.out)


def cmd_dsp_render(cfg, args):
    speed = cfg["audio"]["speed_of_sound"]
    bank = _hrtf_bank(cfg, args.hrtf_dir)
    if args.manifest:
        if not args.pred_dir:
            raise ConfigError("--manifest needs --pred-dir")
        out_dir = Path(args.pred_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for mono_path, pose_path, bin_path in read_manifest(args.manifest):
            x, track = _read_inputs(cfg, mono_path, pose_path)
            write_wav(dsp_render_binaural(x, track, bank, cfg.room(), speed), out_dir / f"{clip_id(bin_path)}.wav")
        print(out_dir)
        return
    if not (args.mono and args.pose and args.out):
        raise ConfigError("dsp-render needs --mono, --pose and --out (or --manifest with --pred-dir)")
    x, track = _read_inputs(cfg, args.mono, args.pose)
    write_wav(dsp_render_binaural(x, track, bank, cfg.room(), speed), args.out, args.encoding)
    print(args.out)


def cmd_eval(cfg, args):
    report = evaluate_manifest(args.pred_dir, args.manifest, cfg.metric_config())
    report.write(args.out)
    if args.figures:
        fig_dir = Path(args.figures)
        plotting.plot_metric_report(report, fig_dir / "metrics.png")
        for _, _, bin_path in read_manifest(args.manifest):
            name = clip_id(bin_path)
            ref = read_wav(bin_path)
            pred = read_wav(Path(args.pred_dir) / f"{name}.wav")
            if pred.channels == 1:
                pred = duplicate_mono(pred)
            plotting.plot_waveforms(pred.samples, ref.samples, ref.sample_rate, fig_dir / f"{name}_wave.png", name)
            plotting.plot_error(pred.samples, ref.samples, ref.sample_rate, fig_dir / f"{name}_error.png", name)
    print(report.to_text(), end="")


def cmd_baselines(cfg, args):
    """Write the analysis baselines for every manifest row: mono, warped mean, channel average."""
    out = Path(args.out)
    for sub in ("mono", "warp_mean", "channel_average"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for mono_path, pose_path, bin_path in read_manifest(args.manifest):
        x, track = _read_inputs(cfg, mono_path, pose_path)
        name = clip_id(bin_path)
        cond = build_condition("common", x, track, speed_of_sound=cfg["audio"]["speed_of_sound"])
        write_wav(x, out / "mono" / f"{name}.wav")
        write_wav(AudioClip(cond.cond_audio[0], x.sample_rate), out / "warp_mean" / f"{name}.wav")
        write_wav(channel_average(read_wav(bin_path)), out / "channel_average" / f"{name}.wav")
    print(out)


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress):
        # the subcommand copy must not reset values given before the subcommand
        kw = {"default": argparse.SUPPRESS} if suppress else {}
        g = _Parser(add_help=False)
        g.add_argument("--config", type=Path, help="TOML config file (keys override the profile)", **kw)
        g.add_argument("--profile", choices=sorted(PROFILES), help="built-in defaults (default: toy)", **kw)
        g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr", **kw)
        return g

    common = global_flags(suppress=True)
    parser = _Parser(prog="binaural-diffusion", description=__doc__.splitlines()[0] if __doc__ else None,
                     parents=[global_flags(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-data", parents=[common], help="generate a synthetic DSP-rendered dataset")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--seed", type=int, help="override [data] seed")
    p.add_argument("--n-clips", type=int, help="override [data] n_clips")
    p.add_argument("--hrtf-dir", type=Path, help="HRTF bank directory (default: built-in generic bank)")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("--stage", required=True, choices=["1", "2", "common", "specific"])
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="checkpoint path")
    p.add_argument("--log", type=Path, help="loss log path (default: <out>.loss.csv)")
    p.add_argument("--steps", type=int, help="override [train] steps")
    p.add_argument("--seed", type=int, help="override [train] seed")
    p.add_argument("--figures", type=Path, help="directory for the loss-curve figure")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", parents=[common], help="two-stage synthesis from mono + pose")
    p.add_argument("--mono", type=Path)
    p.add_argument("--pose", type=Path)
    p.add_argument("--stage1", required=True, type=Path, help="stage 1 (common) checkpoint")
    p.add_argument("--stage2", required=True, type=Path, help="stage 2 (specific) checkpoint")
    p.add_argument("--out", type=Path)
    p.add_argument("--stage1-out", type=Path, help="also write the stage 1 mono output")
    p.add_argument("--manifest", type=Path, help="synthesize every manifest row into --pred-dir")
    p.add_argument("--pred-dir", type=Path)
    p.add_argument("--stage1-dir", type=Path, help="with --manifest, also write stage 1 outputs here")
    p.add_argument("--seed", type=int, help="override [synth] seed")
    p.add_argument("--encoding", choices=["float32", "pcm16"], default="float32")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("dsp-render", parents=[common], help="classical warp + RIR + HRTF rendering")
    p.add_argument("--mono", type=Path)
    p.add_argument("--pose", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--manifest", type=Path, help="render every manifest row into --pred-dir")
    p.add_argument("--pred-dir", type=Path)
    p.add_argument("--hrtf-dir", type=Path, help="HRTF bank directory (default: built-in generic bank)")
    p.add_argument("--encoding", choices=["float32", "pcm16"], default="float32")
    p.set_defaults(func=cmd_dsp_render)

    p = sub.add_parser("eval", parents=[common], help="score predictions against a manifest")
    p.add_argument("--pred-dir", required=True, type=Path, help="directory of <clip>.wav predictions")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="report path (clip,wave_l2,... plus AGGREGATE)")
    p.add_argument("--figures", type=Path, help="directory for waveform/error/metric figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baselines", parents=[common],
                       help="write mono, warped-mean and channel-average reference predictions")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_baselines)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.profile)
        args.func(cfg, args)
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, BinauralError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: IoError: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
