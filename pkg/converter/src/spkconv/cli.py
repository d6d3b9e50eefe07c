"""Command-line surface: convert {shd|ssc|gsc} and verify.

Exit codes: 0 success, 1 bad arguments/config, 2 source or output problems.
"""

from __future__ import annotations

import argparse
import sys

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2


def cmd_convert(args) -> int:
    from pathlib import Path

    from spikedelay.datasets import save_spkds

    from .manifest import build_manifest, write_manifest

    if not Path(args.input).exists():
        print(f"error: input path does not exist: {args.input}", file=sys.stderr)
        return EXIT_CONFIG
    if args.kind in ("shd", "ssc"):
        from .events import SourceError, SpikingJob, convert_spiking, total_events

        try:
            job = SpikingJob(kind=args.kind, input_path=args.input,
                            output_path=args.out, bin_factor=args.bin,
                            dt_ms=args.dt_ms)
            ds = convert_spiking(job)
        except SourceError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        params = {
            "bin_factor": job.bin_factor,
            "dt_ms": job.dt_ms,
            "raw_units": 700,
            "total_events": total_events(ds),
        }
        doc = build_manifest(ds, args.kind, params)
    else:
        from .audio import AudioError, AudioJob, convert_audio, scan_classes

        try:
            job = AudioJob(input_dir=args.input, output_path=args.out,
                           mel_bins=args.mel)
            names = scan_classes(args.input)
            ds = convert_audio(job)
        except AudioError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        params = {
            "mel_bins": job.mel_bins,
            "window_ms": 25.0,
            "hop_ms": 10.0,
            "fmin_hz": job.fmin_hz,
            "fmax_hz": job.fmax_hz,
            "log_floor": 1e-6,
            "mel_scale": "htk",
            "pad_to_seconds": 1.0,
        }
        doc = build_manifest(ds, "gsc", params, class_names=names)
    try:
        save_spkds(args.out, ds)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_DATA
    mpath = write_manifest(args.out, doc)
    print(f"wrote {args.out}: {len(ds.samples)} samples, "
          f"{ds.num_channels} channels, {ds.num_classes} classes; "
          f"manifest {mpath}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import verify

    report = verify(args.path, manifest=not args.no_manifest)
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spkconv",
        description="Convert event archives and speech audio into SPKDS files.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_conv = sub.add_parser("convert", help="convert one source corpus")
    p_conv.add_argument("kind", choices=["shd", "ssc", "gsc"])
    p_conv.add_argument("--in", dest="input", required=True,
                        help="archive file (shd/ssc) or corpus directory (gsc)")
    p_conv.add_argument("--out", required=True, help="output .spkds path")
    p_conv.add_argument("--bin", type=int, default=5,
                        help="spatial bin factor for spiking sources")
    p_conv.add_argument("--dt-ms", type=float, default=10.0,
                        help="time bin width for spiking sources")
    p_conv.add_argument("--mel", type=int, default=140,
                        help="mel bins for audio sources")
    p_conv.set_defaults(func=cmd_convert)

    p_ver = sub.add_parser("verify", help="re-read and check a converted file")
    p_ver.add_argument("path")
    p_ver.add_argument("--no-manifest", action="store_true",
                       help="skip the sidecar comparison")
    p_ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
