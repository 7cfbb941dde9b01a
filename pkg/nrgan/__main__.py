"""Command line entry point: ``nrgan <command> [options]``.

Every config key is also a flag named ``--<section>-<key>`` (underscores
become dashes), e.g. ``--train-iterations 500`` or ``--noise-sigma 15``.
Precedence: packaged preset or ``--config`` file, then ``NRGAN_OUT_DIR`` /
``NRGAN_SEED``, then flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import MISSING, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from .error_handler import ValidationError
from .logging import setup as _setup_logging

logger = logging.getLogger(__name__)

COMMANDS = ("build-data", "train", "eval", "denoise", "grid", "train-denoiser")


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got '{text}'")


def _parse_list(text: str) -> Optional[List[str]]:
    if text.strip().lower() in ("", "none", "default"):
        return None
    return [t.strip() for t in text.split(",") if t.strip()]


def _flag_type(default: Any, annotation: str) -> Callable[[str], Any]:
    if "List" in annotation:
        return _parse_list
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float) or "float" in annotation:
        return float
    if "int" in annotation:
        return int
    return str


class CommandLineBootstrap:
    """Builds the parser, resolves the config and dispatches one command."""

    def __init__(self):
        from . import settings

        self.settings = settings
        self.sections = self._config_sections()
        self.config = None

    def _config_sections(self) -> Dict[str, list]:
        from .noise_zoo import NoiseSpec

        s = self.settings
        noise_fields = [f for f in fields(NoiseSpec) if f.name != "mixture"]
        return {
            "data": list(fields(s.DataSettings)),
            "noise": noise_fields,
            "noise_b": noise_fields,
            "model": list(fields(s.ModelSettings)),
            "train": list(fields(s.TrainConfig)),
            "denoise": list(fields(s.DenoiseConfig)),
            "eval": list(fields(s.EvalSettings)),
        }

    def _add_config_flags(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--config", help="Path to a JSON config file")
        parser.add_argument(
            "--preset",
            help=f"Packaged config preset ({', '.join(self.settings.available_presets())})",
        )
        parser.add_argument("--out-dir", dest="cfg:out_dir", default=argparse.SUPPRESS,
                            help="Output directory of the run")
        parser.add_argument("--seed", dest="cfg:seed", type=int, default=argparse.SUPPRESS,
                            help="Run seed")
        for section, section_fields in self.sections.items():
            group = parser.add_argument_group(f"{section} settings")
            for f in section_fields:
                default = f.default
                group.add_argument(
                    f"--{section}-{f.name}".replace("_", "-"),
                    dest=f"cfg:{section}.{f.name}",
                    type=_flag_type(default, str(f.type)),
                    default=argparse.SUPPRESS,
                    help=None if default is MISSING else f"(default: {default})",
                )

    def parse_arguments(self, argv: list[str] | None = None) -> argparse.Namespace:
        parser = argparse.ArgumentParser(
            prog="nrgan",
            description="Train noise-robust GANs, denoisers and evaluate them",
        )
        sub = parser.add_subparsers(dest="command", required=True)
        helps = {
            "build-data": "Materialize the dataset and its manifest",
            "train": "Train the configured GAN variant",
            "eval": "Evaluate a generator checkpoint",
            "denoise": "Denoise a directory of images with a trained denoiser",
            "grid": "Write a sample grid from a generator checkpoint",
            "train-denoiser": "Train and evaluate the configured denoising scheme",
        }
        for name in COMMANDS:
            p = sub.add_parser(name, help=helps[name])
            self._add_config_flags(p)
            if name in ("eval", "grid", "denoise"):
                p.add_argument("--checkpoint", help="Checkpoint file (defaults to the run's last)")
            if name == "grid":
                p.add_argument("--output", help="PNG path (defaults to grids/sample.png)")
            if name == "denoise":
                p.add_argument("--input-dir", required=True, help="Directory of noisy images")
                p.add_argument("--output-dir", required=True, help="Where denoised PNGs go")
            if name == "train":
                p.add_argument(
                    "--resume", nargs="?", const="last",
                    help="Continue from a generator checkpoint (defaults to the run's last)",
                )
            if name == "train-denoiser":
                p.add_argument("--generator", help="Generator checkpoint for GN2GC")
        return parser.parse_args(argv)

    def load_configuration(self, args: argparse.Namespace):
        s = self.settings
        if args.config and args.preset:
            raise ValidationError("use either --config or --preset, not both")
        if args.config:
            raw = s.read_config_file(args.config)
        elif args.preset:
            raw = s.load_preset(args.preset)
        else:
            raw = {}
        raw = s.apply_env_overrides(raw)
        raw = self._apply_flags(raw, vars(args))
        self.config = s.ExperimentConfig.from_dict(raw)
        return self.config

    @staticmethod
    def _apply_flags(raw: Dict[str, Any], values: Dict[str, Any]) -> Dict[str, Any]:
        from .noise_zoo import NoiseSpec

        out = json.loads(json.dumps(raw))
        overrides = {k[4:]: v for k, v in values.items() if k.startswith("cfg:")}
        # noise variants apply before the other noise keys
        for key, value in sorted(overrides.items(), key=lambda kv: (not kv[0].endswith(".variant"), kv[0])):
            if "." not in key:
                out[key] = value
                continue
            section, name = key.split(".", 1)
            target = out.get(section) or {}
            if section in ("noise", "noise_b") and name == "variant":
                if target.get("variant") != value:
                    try:
                        preset = NoiseSpec.preset(value)
                    except ValueError:
                        raise ValidationError(f"unknown noise variant '{value}'") from None
                    target = {k: v for k, v in preset.to_flat().items() if v is not None}
            target[name] = value
            out[section] = target
        return out

    def run(self, args: argparse.Namespace) -> int:
        from . import harness

        config = self.config
        out_dir = Path(config.out_dir)
        command = args.command
        if command == "build-data":
            data = harness.build_data(config)
            print(f"dataset written to {out_dir} ({len(data.train)} train, {len(data.test)} test)")
        elif command == "train":
            resume = args.resume
            if resume == "last":
                resume = harness.RunPaths(out_dir).generator_ckpt()
            report = harness.run_experiment(config, resume_from=resume)
            print(json.dumps(report, indent=2, sort_keys=True))
        elif command == "eval":
            ckpt = args.checkpoint or harness.RunPaths(out_dir).generator_ckpt()
            report = harness.evaluate_run(ckpt, config)
            print(json.dumps(report, indent=2, sort_keys=True))
        elif command == "grid":
            ckpt = args.checkpoint or harness.RunPaths(out_dir).generator_ckpt()
            path = harness.grid_from_checkpoint(ckpt, config, args.output or out_dir / "grids" / "sample.png")
            print(f"grid written to {path}")
        elif command == "denoise":
            ckpt = args.checkpoint or out_dir / "ckpt" / "denoiser.pt"
            written = harness.denoise_directory(ckpt, args.input_dir, args.output_dir)
            print(f"{len(written)} images written to {args.output_dir}")
        elif command == "train-denoiser":
            report = harness.run_denoiser(config, args.generator)
            print(json.dumps(report, indent=2, sort_keys=True))
        return 0


def main(argv: list[str] | None = None) -> int:
    """Entry point; returns the process exit status."""
    _setup_logging()
    bootstrap = CommandLineBootstrap()
    args = bootstrap.parse_arguments(argv)
    try:
        bootstrap.load_configuration(args)
        return bootstrap.run(args)
    except Exception as e:
        from .error_handler import error_handler

        info = error_handler.handle_error(e, context=args.command)
        print(f"{info['title']}\n\n{info['message']}", file=sys.stderr)
        for hint in info["suggestions"]:
            print(f"  - {hint}", file=sys.stderr)
        return info["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
