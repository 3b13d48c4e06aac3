"""
File manager for ts3codec.
Handles run directories, JSON configs with merged defaults, line-delimited logs,
checkpoint rotation and atomic writes.
"""

import os
import json
import logging
from datetime import datetime
from typing import Any, Dict, Iterable, List, Optional, Tuple

from core.errors import ConfigError

logger = logging.getLogger(__name__)

CHECKPOINT_SUFFIX = ".ts3k"
LATEST_CHECKPOINT = f"latest{CHECKPOINT_SUFFIX}"
CONFIG_SECTIONS = ("codec", "trainer", "adversary")


def write_atomic(path: str, data: bytes):
    """Write bytes to `path` via a temporary sibling so readers never see a partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    try:
        with open(tmp_path, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def write_json(path: str, data: Dict[str, Any]):
    write_atomic(path, json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True).encode('utf-8'))


def read_json(path: str) -> Dict[str, Any]:
    """Load a JSON object, raising ConfigError on unreadable or malformed files."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Malformed JSON in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config {path} must contain a JSON object")
    return data


def parse_override(text: str) -> Tuple[str, str, Any]:
    """
    Parse one `section.field=value` override.

    The value is read as JSON when possible and kept as a string otherwise.
    """
    key, sep, raw = text.partition('=')
    section, dot, name = key.strip().partition('.')
    if not sep or not dot or not name:
        raise ConfigError(f"Override must look like section.field=value, got {text!r}")
    if section not in CONFIG_SECTIONS:
        raise ConfigError(f"Unknown config section {section!r} in override {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, name, value


def apply_overrides(config: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    merged = {section: dict(config.get(section, {})) for section in CONFIG_SECTIONS}
    for text in overrides:
        section, name, value = parse_override(text)
        merged[section][name] = value
    return merged


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> Dict[str, Any]:
    """
    Load a run config as raw section dicts.

    Missing sections default to empty dicts (every field takes its default);
    unknown top-level sections raise ConfigError.
    """
    data = read_json(path) if path else {}
    for section in data:
        if section not in CONFIG_SECTIONS:
            raise ConfigError(f"Unknown config section: {section}")
        if not isinstance(data[section], dict):
            raise ConfigError(f"Config section {section} must be an object")
    return apply_overrides(data, overrides)


class FileManager:
    """Manages the files of one run directory."""

    def __init__(self, run_dir: str, keep_checkpoints: int = 5):
        """
        Initialize file manager.

        Args:
            run_dir: Output directory of the run (created if missing)
            keep_checkpoints: Numbered checkpoints to retain; 0 keeps all
        """
        self.run_dir = run_dir
        self.keep_checkpoints = keep_checkpoints
        self.log_path = os.path.join(run_dir, "train_log.jsonl")
        self.manifest_path = os.path.join(run_dir, "manifest.json")
        os.makedirs(run_dir, exist_ok=True)

    @property
    def latest_checkpoint(self) -> str:
        return os.path.join(self.run_dir, LATEST_CHECKPOINT)

    @property
    def has_run(self) -> bool:
        """True if a training log or any checkpoint already exists here."""
        return (os.path.exists(self.log_path) or os.path.exists(self.latest_checkpoint)
                or bool(self.list_checkpoints()))

    def checkpoint_path(self, step: int) -> str:
        return os.path.join(self.run_dir, f"ckpt_{step:08d}{CHECKPOINT_SUFFIX}")

    def write_manifest(self, manifest: Dict[str, Any]) -> str:
        write_json(self.manifest_path, manifest)
        return self.manifest_path

    def append_log(self, record: Dict[str, Any]):
        """Append one JSON record to the training log."""
        with open(self.log_path, 'a', encoding='utf-8') as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def read_log(self) -> List[Dict[str, Any]]:
        if not os.path.exists(self.log_path):
            return []
        with open(self.log_path, 'r', encoding='utf-8') as f:
            return [json.loads(line) for line in f if line.strip()]

    def truncate_log(self, step: int):
        """Drop records past `step`, e.g. after resuming from an older checkpoint."""
        records = [r for r in self.read_log() if r.get("step", 0) <= step]
        payload = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
        write_atomic(self.log_path, payload.encode('utf-8'))

    def list_checkpoints(self) -> List[Dict[str, Any]]:
        """Numbered checkpoints in this run, newest step first."""
        checkpoints = []
        for file_name in os.listdir(self.run_dir):
            if file_name.startswith("ckpt_") and file_name.endswith(CHECKPOINT_SUFFIX):
                file_path = os.path.join(self.run_dir, file_name)
                stat = os.stat(file_path)
                checkpoints.append({
                    'path': file_path,
                    'step': int(file_name[len("ckpt_"):-len(CHECKPOINT_SUFFIX)]),
                    'modified': datetime.fromtimestamp(stat.st_mtime),
                    'size': stat.st_size,
                })
        checkpoints.sort(key=lambda c: c['step'], reverse=True)
        return checkpoints

    def cleanup_old_checkpoints(self):
        """Remove numbered checkpoints beyond the retention count."""
        if self.keep_checkpoints <= 0:
            return
        for info in self.list_checkpoints()[self.keep_checkpoints:]:
            try:
                os.remove(info['path'])
            except OSError as e:
                logger.warning("Error removing old checkpoint %s: %s", info['path'], e)
