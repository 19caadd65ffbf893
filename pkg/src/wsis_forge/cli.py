"""Command line front end: pipeline stages as composable subcommands.

Exit codes: 0 success, 2 input validation failure, 64 usage error,
65 config schema violation, 70 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import harness
from .arrayio import load_array, load_json, load_mask_png, save_array, save_json
from .core import (
    ActivationStack,
    FormatError,
    ImageGrid,
    SemanticMap,
    ValidationError,
    labels_to_json,
)
from .peak_attention import (
    AttentionParams,
    PeakCueSet,
    extract_instance_cues,
    sharpen_activations,
)
from .transfer import labels_to_targets, load_point_cues, transfer_knowledge

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_USAGE = 64
EXIT_CONFIG = 65
EXIT_INTERNAL = 70

THREADS_ENV = "WSIS_FORGE_THREADS"


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="wsis-forge",
                     description="Weakly-supervised instance label pipeline stages")
    sub = parser.add_subparsers(dest="command", required=True)

    p_cues = sub.add_parser("cues", parents=[], help="extract instance cues from an activation stack")
    p_cues.add_argument("--activations", required=True, help="NPY stack of shape (K, H, W)")
    p_cues.add_argument("--params", help="controller parameter JSON (required unless --mode raw)")
    p_cues.add_argument("--delta-p", type=float, default=0.5, help="cue score threshold")
    p_cues.add_argument("--mode", choices=("pam", "raw"), default="pam",
                        help="sharpen activations first, or extract from the raw stack")
    p_cues.add_argument("--out", required=True, help="output cue JSON path")

    p_tr = sub.add_parser("transfer", help="build pseudo instance labels from a semantic map")
    p_tr.add_argument("--wsss", required=True, help="semantic map (palette PNG or int NPY)")
    p_tr.add_argument("--cues", help="cue JSON produced by the cues stage")
    p_tr.add_argument("--points", help="point label JSON: [{class_id, y, x}, ...]")
    p_tr.add_argument("--min-area", type=int, default=16)
    p_tr.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p_tr.add_argument("--sigma", type=float, default=8.0)
    p_tr.add_argument("--out-dir", required=True)

    p_run = sub.add_parser("run", help="run a configured experiment suite")
    p_run.add_argument("--config", required=True, help="experiment config JSON")
    p_run.add_argument("--threads", type=int, default=None,
                       help=f"worker bound; falls back to ${THREADS_ENV}, then 1")
    return parser


def _load_semantic(path: str) -> SemanticMap:
    if path.endswith(".png"):
        return load_mask_png(path)
    labels = load_array(path, expected_rank=2, kind="int")
    grid = ImageGrid(labels.shape[0], labels.shape[1])
    num_classes = max(1, int(labels.max()))
    return SemanticMap(grid=grid, labels=labels, num_classes=num_classes)


def _cmd_cues(args) -> int:
    arr = load_array(args.activations, expected_rank=3, kind="float")
    grid = ImageGrid(arr.shape[1], arr.shape[2])
    stack = ActivationStack(grid=grid, channels=arr)
    if args.mode == "pam":
        if not args.params:
            print("wsis-forge cues: --params is required with --mode pam", file=sys.stderr)
            return EXIT_USAGE
        params = AttentionParams.from_json(load_json(args.params))
        stack = sharpen_activations(stack, params)
    cues = extract_instance_cues(stack, cue_threshold=args.delta_p)
    save_json(args.out, cues.to_json())
    return EXIT_OK


def _cmd_transfer(args) -> int:
    if bool(args.cues) == bool(args.points):
        print("wsis-forge transfer: exactly one of --cues/--points is required",
              file=sys.stderr)
        return EXIT_USAGE
    wsss = _load_semantic(args.wsss)
    if args.cues:
        cues = PeakCueSet.from_json(load_json(args.cues))
    else:
        cues = load_point_cues(args.points, grid=wsss.grid)
    labels, diag = transfer_knowledge(wsss, cues, min_area=args.min_area,
                                      connectivity=args.connectivity)
    targets = labels_to_targets(labels, sigma=args.sigma, num_classes=wsss.num_classes)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_array(out / "pseudo_center.npy", targets.center.channels)
    save_array(out / "pseudo_offset.npy", np.stack([targets.offset.dy, targets.offset.dx]))
    save_json(out / "labels.json", labels_to_json(labels))
    save_json(out / "diagnostics.json", diag.to_json())
    return EXIT_OK


def _cmd_run(args) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except json.JSONDecodeError as exc:
        print(f"wsis-forge run: config is not valid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    threads = args.threads
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env else None
    try:
        summary = harness.run_experiment(config, threads=threads)
    except harness.ConfigError as exc:
        print(f"wsis-forge run: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"cues": _cmd_cues, "transfer": _cmd_transfer, "run": _cmd_run}
    try:
        return handlers[args.command](args)
    except FileNotFoundError as exc:
        print(f"wsis-forge {args.command}: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValidationError, FormatError) as exc:
        print(f"wsis-forge {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except harness.TrainingDiverged as exc:
        print(f"wsis-forge {args.command}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - defensive
        print(f"wsis-forge {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
