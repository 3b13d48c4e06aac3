"""
Command-line interface for ts3codec.
Subcommands train, encode, decode, eval, info and macs; each writes a run manifest.
"""

import argparse
import glob
import json
import logging
import os
import sys
from dataclasses import dataclass, field, asdict
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.table import Table

from core import __version__
from core.adversary import AdversaryConfig
from core.analysis import available_scorers, codebook_stats, macs, window_sweep
from core.checkpoint import load_model, read_config
from core.errors import (
    BitstreamError, CheckpointError, CodecError, ConfigError, DataError, SessionError,
    ShapeError, TokenError, TrainingDivergedError,
)
from core.model import NAMED_CONFIGS, CodecConfig, TokenSequence, named_config, param_count
from core.trainer import Trainer, TrainerConfig, export_inference, load_corpus
from core.wire import (
    decode_container, encode_waveform, rates, read_container, stream_decode, stream_encode,
    write_container,
)
from utils.audio_io import load_wav, save_wav
from utils.file_manager import FileManager, load_config, write_json

logger = logging.getLogger(__name__)

DEVICE_ENV = "TS3C_DEVICE"
EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


@dataclass
class RunManifest:
    """Everything needed to reproduce one command invocation."""
    command: str
    argv: List[str]
    config: Dict[str, Any]
    seed: Optional[int]
    device: str
    code_version: str = __version__
    started_at: str = field(default_factory=lambda: datetime.now().isoformat())
    finished_at: Optional[str] = None
    outputs: List[str] = field(default_factory=list)

    def write(self, path: str):
        write_json(path, asdict(self))

    def finish(self, path: str, outputs: Sequence[str] = ()):
        self.outputs.extend(outputs)
        self.finished_at = datetime.now().isoformat()
        self.write(path)


def device_from_env() -> str:
    return os.environ.get(DEVICE_ENV, "cpu")


def resolve_config(raw: Dict[str, Dict[str, Any]],
                   require_trainer: bool = False) -> Tuple[CodecConfig, Optional[TrainerConfig], AdversaryConfig]:
    """Turn raw config sections into typed configs; the codec section defaults to the tiny preset."""
    codec = dict(raw.get("codec", {}))
    codec.setdefault("config_id", "tiny")
    codec_cfg = CodecConfig.from_dict(codec)
    trainer_cfg = None
    if require_trainer or raw.get("trainer"):
        trainer_cfg = TrainerConfig.from_dict(raw.get("trainer", {}))
    adversary_cfg = AdversaryConfig.from_dict(raw.get("adversary", {}))
    return codec_cfg, trainer_cfg, adversary_cfg


def resolve_codec_target(target: str) -> CodecConfig:
    """A named config id, a JSON config file, or a checkpoint."""
    if target in NAMED_CONFIGS:
        return named_config(target)
    if not os.path.exists(target):
        valid = ", ".join(NAMED_CONFIGS)
        raise ConfigError(f"{target!r} is neither a config id ({valid}) nor an existing file")
    if target.endswith(".json"):
        return resolve_config(load_config(target))[0]
    try:
        return read_config(target)
    except CheckpointError as e:
        raise ConfigError(f"Unknown format for {target}: {e}") from e


def _default_manifest(args, output: Optional[str]) -> str:
    if args.manifest:
        return args.manifest
    if output:
        return f"{output}.manifest.json"
    return f"ts3codec_{args.command}.manifest.json"


def cmd_train(args) -> int:
    """Train (or resume) a codec on a directory of WAV files."""
    raw = load_config(args.config, args.set)
    codec_cfg, trainer_cfg, adversary_cfg = resolve_config(raw, require_trainer=True)
    device = device_from_env()
    file_manager = FileManager(args.out_dir, keep_checkpoints=trainer_cfg.keep_checkpoints)
    resuming = args.resume and os.path.exists(file_manager.latest_checkpoint)
    if not resuming and file_manager.has_run:
        raise ConfigError(
            f"{args.out_dir} already holds a training run; pass --resume or choose another --out-dir"
        )
    manifest_path = args.manifest or file_manager.manifest_path
    manifest = RunManifest(command="train", argv=sys.argv, config=raw, seed=trainer_cfg.seed, device=device)
    manifest.write(manifest_path)

    if resuming:
        trainer = Trainer.from_checkpoint(file_manager.latest_checkpoint, device=device)
        file_manager.truncate_log(trainer.step)
    else:
        trainer = Trainer(codec_cfg, trainer_cfg, adversary_cfg, device=device)
    corpus = load_corpus(args.data_dir)
    trainer.run(corpus, file_manager, max_steps=args.steps, progress=not args.quiet)

    inference_path = os.path.join(args.out_dir, "inference.ts3k")
    export_inference(trainer, inference_path)
    manifest.finish(manifest_path, [file_manager.log_path, file_manager.latest_checkpoint, inference_path])
    return EXIT_OK


def cmd_encode(args) -> int:
    """WAV -> .ts3c container, or s16le stdin -> token lines on stdout."""
    device = device_from_env()
    model = load_model(args.checkpoint, device=device)
    manifest_path = _default_manifest(args, args.output)
    manifest = RunManifest(command="encode", argv=sys.argv, config=model.cfg.to_dict(), seed=None, device=device)
    manifest.write(manifest_path)
    if args.stdin:
        stream_encode(model, sys.stdin.buffer, sys.stdout)
        manifest.finish(manifest_path)
        return EXIT_OK
    if not args.input or not args.output:
        raise ConfigError("encode needs an input WAV and an output path (or --stdin)")
    container = encode_waveform(model, load_wav(args.input), stream=args.stream)
    write_container(args.output, container)
    logger.info("Encoded %s: %d tokens, %d payload bytes", args.input, container.token_count,
                len(container.payload()))
    manifest.finish(manifest_path, [args.output])
    return EXIT_OK


def cmd_decode(args) -> int:
    """.ts3c container -> WAV, or token lines on stdin -> s16le on stdout."""
    device = device_from_env()
    model = load_model(args.checkpoint, device=device)
    manifest_path = _default_manifest(args, args.output)
    manifest = RunManifest(command="decode", argv=sys.argv, config=model.cfg.to_dict(), seed=None, device=device)
    manifest.write(manifest_path)
    if args.stdin:
        stream_decode(model, sys.stdin, sys.stdout.buffer)
        manifest.finish(manifest_path)
        return EXIT_OK
    if not args.input or not args.output:
        raise ConfigError("decode needs an input container and an output WAV path (or --stdin)")
    wave = decode_container(model, read_container(args.input), stream=args.stream)
    save_wav(args.output, wave)
    manifest.finish(manifest_path, [args.output])
    return EXIT_OK


def evaluate_corpus(wav_dir: str, model=None) -> Dict[str, Any]:
    """
    Score every WAV under `wav_dir` against its reconstruction.

    With no model each file is scored against itself. Unreadable files are
    skipped with a warning; DataError is raised if none can be scored.
    """
    paths = sorted(glob.glob(os.path.join(wav_dir, "**", "*.wav"), recursive=True))
    scorers = available_scorers()
    records, all_ids = [], []
    for path in paths:
        try:
            reference = load_wav(path)
            record: Dict[str, Any] = {"file": os.path.relpath(path, wav_dir), "samples": len(reference)}
            decoded = reference
            if model is not None:
                container = encode_waveform(model, reference)
                decoded = decode_container(model, container)
                stats = codebook_stats(container.to_tokens(), model.cfg.codebook_size)
                record.update(tokens=container.token_count, utilization=stats.utilization,
                              perplexity=stats.perplexity)
                all_ids.append(container.ids)
            for name, scorer in sorted(scorers.items()):
                record[name] = float(scorer(reference, decoded))
        except CodecError as e:
            logger.warning("Skipping %s: %s", path, e)
            continue
        records.append(record)
    if not records:
        raise DataError(f"No WAV file under {wav_dir} could be evaluated")

    summary: Dict[str, Any] = {"files": len(records), "skipped": len(paths) - len(records)}
    for name in sorted(scorers):
        summary[f"mean_{name}"] = float(np.mean([r[name] for r in records]))
    if model is not None:
        frame_rate, token_rate, bitrate = rates(model.cfg)
        corpus_stats = codebook_stats(TokenSequence(np.concatenate(all_ids), frame_rate, 0),
                                      model.cfg.codebook_size)
        summary.update(config_id=model.cfg.config_id, frame_rate=frame_rate, token_rate=token_rate,
                       bitrate=bitrate, utilization=corpus_stats.utilization,
                       perplexity=corpus_stats.perplexity)
    return {"files": records, "summary": summary}


def cmd_eval(args) -> int:
    device = device_from_env()
    model = None
    if not args.passthrough:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint unless --passthrough is given")
        model = load_model(args.checkpoint, device=device)
    manifest_path = _default_manifest(args, args.output)
    manifest = RunManifest(command="eval", argv=sys.argv, config=model.cfg.to_dict() if model else {},
                           seed=None, device=device)
    manifest.write(manifest_path)

    report = evaluate_corpus(args.wav_dir, model)
    if args.output:
        write_json(args.output, report)
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        table = Table(title="Evaluation")
        columns = [key for key in report["files"][0] if key != "file"]
        table.add_column("file")
        for column in columns:
            table.add_column(column, justify="right")
        for record in report["files"]:
            table.add_row(record["file"], *(_fmt(record.get(c)) for c in columns))
        Console().print(table)
        Console().print({k: _fmt(v) for k, v in report["summary"].items()})
    manifest.finish(manifest_path, [args.output] if args.output else [])
    return EXIT_OK


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def info_row(cfg: CodecConfig) -> Dict[str, Any]:
    """Bitrate, frame rate, token rate, MACs and parameters of a config."""
    frame_rate, token_rate, bitrate = rates(cfg)
    report = macs(cfg)
    return {
        "config": cfg.config_id,
        "bitrate": bitrate,
        "frame_rate": frame_rate,
        "token_rate": token_rate,
        "gmacs": report.gmacs,
        "reference_gmacs": report.reference_gmacs,
        "params_m": param_count(cfg) / 1e6,
    }


def cmd_info(args) -> int:
    cfg = resolve_codec_target(args.target)
    manifest_path = _default_manifest(args, None)
    manifest = RunManifest(command="info", argv=sys.argv, config=cfg.to_dict(), seed=None,
                           device=device_from_env())
    manifest.write(manifest_path)
    row = info_row(cfg)
    if args.json:
        print(json.dumps(row, sort_keys=True))
    else:
        table = Table(title=f"ts3codec {cfg.config_id}")
        for column in ("Config", "Bitrate", "Frame Rate", "Token Rate", "MACs", "Reported MACs", "Params"):
            table.add_column(column, justify="right")
        reference = f"{row['reference_gmacs']}G" if row["reference_gmacs"] else "-"
        table.add_row(cfg.config_id, f"{row['bitrate']:g}", f"{row['frame_rate']:g}", f"{row['token_rate']:g}",
                      f"{row['gmacs']:.2f}G", reference, f"{row['params_m']:.1f}M")
        Console().print(table)
    manifest.finish(manifest_path)
    return EXIT_OK


def cmd_macs(args) -> int:
    cfg = resolve_codec_target(args.target)
    manifest_path = _default_manifest(args, None)
    manifest = RunManifest(command="macs", argv=sys.argv, config=cfg.to_dict(), seed=None,
                           device=device_from_env())
    manifest.write(manifest_path)
    report = macs(cfg, seconds=args.seconds)
    sweep = window_sweep(cfg, args.windows) if args.windows else []
    if args.json:
        print(json.dumps({"macs": report.to_dict(), "window_sweep": sweep}, sort_keys=True))
    else:
        console = Console()
        table = Table(title=f"MACs for {report.seconds:g}s of audio ({cfg.config_id}, {report.frames} frames)")
        table.add_column("Component")
        table.add_column("MACs", justify="right")
        for name, value in report.components.items():
            table.add_row(name, f"{value:,}")
        table.add_row("total", f"{report.total:,}")
        console.print(table)
        if report.reference_gmacs:
            console.print(f"Reported: {report.reference_gmacs}G (counting convention unpublished)")
        console.print(f"Convention: {report.convention}")
        if sweep:
            sweep_table = Table(title="Window sweep")
            for column in ("window", "gmacs", "receptive_field_frames", "receptive_field_ms"):
                sweep_table.add_column(column, justify="right")
            for row in sweep:
                sweep_table.add_row(*(_fmt(row[c]) for c in ("window", "gmacs", "receptive_field_frames",
                                                             "receptive_field_ms")))
            console.print(sweep_table)
    manifest.finish(manifest_path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ts3codec", description="Transformer-only streaming speech codec")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--manifest", help="Run manifest path (defaults next to the main output)")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train a codec")
    train.add_argument("--config", help="JSON config with codec/trainer/adversary sections")
    train.add_argument("--data-dir", required=True)
    train.add_argument("--out-dir", required=True)
    train.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE")
    train.add_argument("--steps", type=int, help="Stop after this many more steps")
    train.add_argument("--resume", action="store_true", help="Continue from latest.ts3k in --out-dir")
    train.add_argument("--quiet", action="store_true", help="Hide the progress bar")
    train.set_defaults(func=cmd_train)

    for name, func, help_text in (("encode", cmd_encode, "WAV to .ts3c container"),
                                  ("decode", cmd_decode, ".ts3c container to WAV")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("checkpoint")
        p.add_argument("input", nargs="?")
        p.add_argument("output", nargs="?")
        p.add_argument("--stream", action="store_true", help="Run through the streaming session")
        p.add_argument("--stdin", action="store_true", help="Pipe mode over stdin/stdout")
        p.set_defaults(func=func)

    evaluate = sub.add_parser("eval", help="Score reconstructions of a WAV directory")
    evaluate.add_argument("wav_dir")
    evaluate.add_argument("--checkpoint")
    evaluate.add_argument("--passthrough", action="store_true", help="Score each file against itself")
    evaluate.add_argument("--output", help="Write the JSON report here")
    evaluate.add_argument("--json", action="store_true")
    evaluate.set_defaults(func=cmd_eval)

    info = sub.add_parser("info", help="Rates, MACs and parameters of a config or checkpoint")
    info.add_argument("target", help="Config id, JSON config or checkpoint")
    info.add_argument("--json", action="store_true")
    info.set_defaults(func=cmd_info)

    counter = sub.add_parser("macs", help="Per-component MAC counts")
    counter.add_argument("target", help="Config id, JSON config or checkpoint")
    counter.add_argument("--seconds", type=float, default=1.0)
    counter.add_argument("--windows", type=int, nargs="*", help="Also sweep these attention windows")
    counter.add_argument("--json", action="store_true")
    counter.set_defaults(func=cmd_macs)
    return parser


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, (DataError, ShapeError, TokenError)):
        return EXIT_DATA
    if isinstance(error, (CheckpointError, BitstreamError, SessionError, TrainingDivergedError, CodecError)):
        return EXIT_RUNTIME
    return EXIT_UNEXPECTED


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one subcommand and return its exit status."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except (CodecError, TrainingDivergedError) as e:
        logger.error("%s", e)
        return exit_code_for(e)
    except Exception:
        logger.exception("Unexpected failure in %s", args.command)
        return EXIT_UNEXPECTED
