"""
GAN training loop for ts3codec.
Learning-rate schedule, random cropping, alternating discriminator/generator updates,
training checkpoints and line-delimited loss logging.
"""

import copy
import glob
import logging
import math
import os
from dataclasses import dataclass, asdict, fields
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
from torch.nn.utils import clip_grad_norm_
from tqdm import tqdm

from .adversary import AdversaryConfig, Discriminators
from .checkpoint import KIND_TRAINING, CheckpointArchive, read_checkpoint, save_inference
from .errors import CheckpointError, ConfigError, DataError, TrainingDivergedError
from .framing import SAMPLE_RATE
from .losses import (
    LossReport, LossWeights, MultiScaleMelLoss, discriminator_adversarial_loss,
    feature_matching_loss, generator_adversarial_loss, total_losses, vq_losses,
)
from .model import CodecConfig, TS3Codec

logger = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    """Optimizer, schedule and data pipeline settings."""
    batch_size: int
    beta1: float = 0.8
    beta2: float = 0.9
    weight_decay: float = 0.0
    lr_start: float = 2e-4
    lr_end: float = 2e-5
    warmup_steps: int = 1000
    total_steps: int = 500000
    crop_seconds: float = 10.0
    seed: int = 0
    checkpoint_interval: int = 1000
    keep_checkpoints: int = 5
    log_interval: int = 50
    grad_clip: float = 0.0
    deterministic: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"trainer.batch_size must be a positive integer, got {self.batch_size!r}")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError(
                f"trainer learning rates need lr_start >= lr_end > 0, got {self.lr_start} and {self.lr_end}"
            )
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(
                f"trainer.warmup_steps ({self.warmup_steps}) must be below total_steps ({self.total_steps})"
            )
        if self.crop_seconds <= 0:
            raise ConfigError(f"trainer.crop_seconds must be positive, got {self.crop_seconds}")
        if self.checkpoint_interval < 1 or self.log_interval < 1:
            raise ConfigError("trainer checkpoint_interval and log_interval must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"trainer betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")

    @property
    def crop_samples(self) -> int:
        return int(round(self.crop_seconds * SAMPLE_RATE))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainerConfig':
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"Unknown trainer field: {key}")
        if "batch_size" not in data:
            raise ConfigError("trainer.batch_size is required")
        return cls(**data)


def lr_at_step(cfg: TrainerConfig, step: int) -> float:
    """
    Scheduled learning rate.

    Linear ramp from 0 to lr_start over warmup_steps, then linear decline to
    lr_end at total_steps. Steps outside [0, total_steps] are clamped.
    """
    step = min(max(step, 0), cfg.total_steps)
    if step < cfg.warmup_steps:
        return cfg.lr_start * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_start * (1.0 - progress) + cfg.lr_end * progress


def crop_batch(utterances: Sequence[np.ndarray], crop_seconds: float, rng: np.random.Generator,
               sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """
    Cut one fixed-length window out of every utterance.

    Args:
        utterances: 1-D sample arrays
        crop_seconds: Window length in seconds
        rng: Source of the uniformly random start offsets

    Returns:
        (len(utterances), crop_seconds * sample_rate) float32 array; short
        utterances are zero-padded at the end.
    """
    if len(utterances) == 0:
        raise DataError("Cannot crop a batch from an empty set of utterances")
    length = int(round(crop_seconds * sample_rate))
    batch = np.zeros((len(utterances), length), dtype=np.float32)
    for row, samples in enumerate(utterances):
        samples = np.asarray(samples, dtype=np.float32)
        if samples.shape[0] <= length:
            batch[row, :samples.shape[0]] = samples
            continue
        offset = int(rng.integers(0, samples.shape[0] - length + 1))
        batch[row] = samples[offset:offset + length]
    return batch


def load_corpus(data_dir: str) -> List[np.ndarray]:
    """Every WAV under `data_dir` (recursive, sorted by path) as 16 kHz mono float32 arrays."""
    from utils.audio_io import load_wav

    paths = sorted(glob.glob(os.path.join(data_dir, "**", "*.wav"), recursive=True))
    if not paths:
        raise DataError(f"No WAV files found under {data_dir}")
    corpus = [load_wav(path).samples for path in tqdm(paths, desc="Loading corpus", leave=False)]
    hours = sum(len(u) for u in corpus) / SAMPLE_RATE / 3600
    logger.info("Loaded %d utterances (%.2f hours) from %s", len(corpus), hours, data_dir)
    return corpus


class Trainer:
    """Owns the generator, discriminators, optimizers and all training state."""

    def __init__(self, codec_cfg: CodecConfig, trainer_cfg: TrainerConfig,
                 adversary_cfg: Optional[AdversaryConfig] = None, device: str = "cpu",
                 dtype: torch.dtype = torch.float32):
        self.codec_cfg = codec_cfg
        self.cfg = trainer_cfg
        self.adversary_cfg = adversary_cfg or AdversaryConfig()
        self.device = torch.device(device)
        self.dtype = dtype

        if trainer_cfg.crop_samples % codec_cfg.frame_size:
            raise ConfigError(
                f"trainer.crop_seconds gives {trainer_cfg.crop_samples} samples, "
                f"not a multiple of frame_size {codec_cfg.frame_size}"
            )
        if trainer_cfg.crop_samples < self.adversary_cfg.min_length:
            raise ConfigError(
                f"trainer.crop_seconds gives {trainer_cfg.crop_samples} samples, "
                f"below the discriminator minimum of {self.adversary_cfg.min_length}"
            )
        if trainer_cfg.deterministic:
            # cuBLAS reads this before its first call
            os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
            torch.use_deterministic_algorithms(True)

        torch.manual_seed(trainer_cfg.seed)
        self.rng = np.random.default_rng(trainer_cfg.seed)
        self.generator = TS3Codec(codec_cfg).to(device=self.device, dtype=dtype)
        self.discriminators = Discriminators(self.adversary_cfg).to(device=self.device, dtype=dtype)
        self.mel_loss = MultiScaleMelLoss().to(self.device)
        self.weights = LossWeights.for_codebook(codec_cfg.codebook_size)

        betas = (trainer_cfg.beta1, trainer_cfg.beta2)
        self.optimizer_g = torch.optim.AdamW(self.generator.parameters(), lr=lr_at_step(trainer_cfg, 0),
                                             betas=betas, weight_decay=trainer_cfg.weight_decay)
        self.optimizer_d = torch.optim.AdamW(self.discriminators.parameters(), lr=lr_at_step(trainer_cfg, 0),
                                             betas=betas, weight_decay=trainer_cfg.weight_decay)
        self.step = 0

    def _set_lr(self, lr: float):
        for optimizer in (self.optimizer_g, self.optimizer_d):
            for group in optimizer.param_groups:
                group["lr"] = lr

    def _clip(self, module: torch.nn.Module):
        if self.cfg.grad_clip > 0:
            clip_grad_norm_(module.parameters(), self.cfg.grad_clip)

    def next_batch(self, corpus: Sequence[np.ndarray]) -> torch.Tensor:
        """Draw batch_size utterances with replacement and crop them."""
        if len(corpus) == 0:
            raise DataError("Training corpus is empty")
        picks = self.rng.integers(0, len(corpus), size=self.cfg.batch_size)
        batch = crop_batch([corpus[i] for i in picks], self.cfg.crop_seconds, self.rng)
        return torch.as_tensor(batch, dtype=self.dtype, device=self.device)

    def train_step(self, batch: torch.Tensor) -> LossReport:
        """
        One discriminator update on the detached reconstruction, then one generator update.

        Args:
            batch: (B, T) real waveforms, T a multiple of frame_size

        Returns:
            LossReport of this step
        """
        lr = lr_at_step(self.cfg, self.step)
        self._set_lr(lr)
        self.generator.train()
        self.discriminators.train()

        output = self.generator(batch)
        fake = output.reconstruction

        self.discriminators.requires_grad_(True)
        real_out = self.discriminators(batch)
        fake_out = self.discriminators(fake.detach())
        loss_d = discriminator_adversarial_loss(real_out.logits, fake_out.logits)
        if not math.isfinite(loss_d.item()):
            raise TrainingDivergedError(
                f"Discriminator loss became {loss_d.item()} at step {self.step}",
                report={"step": self.step, "lr": lr, "gan_d": loss_d.item()},
            )
        self.optimizer_d.zero_grad(set_to_none=True)
        loss_d.backward()
        self._clip(self.discriminators)
        discriminator_state = copy.deepcopy(self.discriminators.state_dict())
        optimizer_d_state = copy.deepcopy(self.optimizer_d.state_dict())
        self.optimizer_d.step()

        self.discriminators.requires_grad_(False)
        try:
            with torch.no_grad():
                real_out = self.discriminators(batch)
            fake_out = self.discriminators(fake)
            terms = {
                "mel": self.mel_loss(fake, batch),
                "gan_g": generator_adversarial_loss(fake_out.logits),
                "feature": feature_matching_loss(real_out.features, fake_out.features),
                "gan_d": loss_d.detach(),
            }
            terms["vq"], terms["commitment"] = vq_losses(output.pre_quant, output.post_quant)
            loss_g, _ = total_losses(terms, self.weights)

            report = LossReport(
                generator_total=loss_g.item(),
                discriminator_total=loss_d.item(),
                **{name: value.item() for name, value in terms.items()},
            )
            if not report.is_finite():
                # the step did not happen: undo the discriminator update
                self.discriminators.load_state_dict(discriminator_state)
                self.optimizer_d.load_state_dict(optimizer_d_state)
                raise TrainingDivergedError(f"Non-finite loss at step {self.step}: {report.to_dict()}",
                                            report=report)
            self.optimizer_g.zero_grad(set_to_none=True)
            loss_g.backward()
            self._clip(self.generator)
            self.optimizer_g.step()
        finally:
            self.discriminators.requires_grad_(True)

        self.step += 1
        return report

    def run(self, corpus: Sequence[np.ndarray], file_manager, max_steps: Optional[int] = None,
            progress: bool = True) -> int:
        """
        Train until total_steps (or `max_steps` more steps), logging every step.

        Numbered checkpoints are written every checkpoint_interval steps and
        `latest` is refreshed with them; an interruption saves `latest` first.

        Returns:
            The step counter when the loop stops.
        """
        target = self.cfg.total_steps if max_steps is None else min(self.cfg.total_steps, self.step + max_steps)
        bar = tqdm(total=target, initial=self.step, desc="Training", disable=not progress)
        try:
            while self.step < target:
                lr = lr_at_step(self.cfg, self.step)
                report = self.train_step(self.next_batch(corpus))
                file_manager.append_log({"step": self.step, "lr": lr, **report.to_dict()})
                bar.update(1)
                if self.step % self.cfg.log_interval == 0:
                    logger.info("step %d lr %.3g mel %.4f gan_g %.4f gan_d %.4f vq %.4f",
                                self.step, lr, report.mel, report.gan_g, report.gan_d, report.vq)
                if self.step % self.cfg.checkpoint_interval == 0:
                    self.save_checkpoint(file_manager.checkpoint_path(self.step))
                    self.save_checkpoint(file_manager.latest_checkpoint)
                    file_manager.cleanup_old_checkpoints()
        except KeyboardInterrupt:
            logger.warning("Interrupted at step %d; saving %s", self.step, file_manager.latest_checkpoint)
            self.save_checkpoint(file_manager.latest_checkpoint)
        finally:
            bar.close()
        if self.step == target and self.step % self.cfg.checkpoint_interval:
            self.save_checkpoint(file_manager.latest_checkpoint)
        return self.step

    def _header(self) -> Dict[str, Any]:
        return {
            "codec": self.codec_cfg.to_dict(),
            "trainer": self.cfg.to_dict(),
            "adversary": self.adversary_cfg.to_dict(),
            "step": self.step,
            "numpy_rng": self.rng.bit_generator.state,
            "dtype": str(self.dtype).replace("torch.", ""),
            "meta": {},
        }

    def save_checkpoint(self, path: str):
        """Write weights, optimizer states, step counter and RNG states."""
        from utils.file_manager import write_atomic

        payload = {
            "generator": self.generator.state_dict(),
            "discriminators": self.discriminators.state_dict(),
            "optimizer_g": self.optimizer_g.state_dict(),
            "optimizer_d": self.optimizer_d.state_dict(),
            "torch_rng": torch.get_rng_state(),
        }
        write_atomic(path, CheckpointArchive().encode(KIND_TRAINING, self._header(), payload))
        logger.debug("Wrote training checkpoint %s at step %d", path, self.step)

    def load_checkpoint(self, path: str):
        """Restore state saved by save_checkpoint into this trainer."""
        kind, header, payload = read_checkpoint(path, map_location=str(self.device))
        if kind != KIND_TRAINING:
            raise CheckpointError(f"{path} is an inference checkpoint and cannot resume training")
        if CodecConfig.from_dict(header["codec"]) != self.codec_cfg:
            raise CheckpointError(
                f"{path} holds codec config {header['codec'].get('config_id')}, "
                f"trainer uses {self.codec_cfg.config_id}"
            )
        try:
            self.generator.load_state_dict(payload["generator"])
            self.discriminators.load_state_dict(payload["discriminators"])
            self.optimizer_g.load_state_dict(payload["optimizer_g"])
            self.optimizer_d.load_state_dict(payload["optimizer_d"])
        except (KeyError, RuntimeError, ValueError) as e:
            raise CheckpointError(f"Checkpoint {path} does not match this trainer: {e}") from e
        torch.set_rng_state(payload["torch_rng"].cpu())
        self.rng.bit_generator.state = header["numpy_rng"]
        self.step = int(header["step"])
        logger.info("Resumed from %s at step %d", path, self.step)

    @classmethod
    def from_checkpoint(cls, path: str, device: str = "cpu") -> 'Trainer':
        """Build a trainer from the configs stored in a training checkpoint and restore it."""
        _, header, _ = read_checkpoint(path)
        if "trainer" not in header:
            raise CheckpointError(f"{path} is not a training checkpoint")
        trainer = cls(
            CodecConfig.from_dict(header["codec"]),
            TrainerConfig.from_dict(header["trainer"]),
            AdversaryConfig.from_dict(header["adversary"]),
            device=device,
            dtype=getattr(torch, header.get("dtype", "float32")),
        )
        trainer.load_checkpoint(path)
        return trainer


def export_inference(trainer: Trainer, path: str):
    """Write the trainer's generator as an inference checkpoint."""
    save_inference(path, trainer.generator, metadata={"step": trainer.step})
