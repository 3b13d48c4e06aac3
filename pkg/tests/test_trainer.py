import os

import numpy as np
import pytest
import torch

from cli.commands import device_from_env
from core.adversary import AdversaryConfig
from core.analysis import codebook_stats
from core.checkpoint import KIND_INFERENCE, load_model, read_checkpoint
from core.errors import CheckpointError, ConfigError, DataError, TrainingDivergedError
from core.framing import Waveform
from core.model import named_config
from core.trainer import (
    Trainer, TrainerConfig, crop_batch, export_inference, load_corpus, lr_at_step,
)
from utils.file_manager import FileManager

from .conftest import make_micro_config


def schedule(**overrides):
    return TrainerConfig(batch_size=1, **overrides)


def test_lr_schedule_endpoints():
    cfg = schedule()
    assert lr_at_step(cfg, 0) == 0.0
    assert lr_at_step(cfg, 500) == pytest.approx(1e-4)
    assert lr_at_step(cfg, 1000) == 2e-4
    assert lr_at_step(cfg, 250500) == pytest.approx(1.1e-4)
    assert lr_at_step(cfg, 500000) == 2e-5


def test_lr_schedule_clamps_and_is_piecewise_linear():
    cfg = schedule()
    assert lr_at_step(cfg, -10) == 0.0
    assert lr_at_step(cfg, 900000) == 2e-5
    for a, b in [(0, 1000), (1000, 500000), (20000, 40000)]:
        middle = (a + b) // 2
        assert lr_at_step(cfg, middle) == pytest.approx((lr_at_step(cfg, a) + lr_at_step(cfg, b)) / 2)
    peak = max(lr_at_step(cfg, s) for s in range(0, 500001, 250))
    assert peak == lr_at_step(cfg, 1000)


def test_trainer_config_validation():
    with pytest.raises(ConfigError, match="batch_size"):
        TrainerConfig.from_dict({"seed": 1})
    with pytest.raises(ConfigError):
        schedule(lr_start=1e-5, lr_end=2e-5)
    with pytest.raises(ConfigError):
        schedule(warmup_steps=10, total_steps=10)
    with pytest.raises(ConfigError, match="Unknown trainer field"):
        TrainerConfig.from_dict({"batch_size": 2, "epochs": 3})
    assert TrainerConfig.from_dict({"batch_size": 2}).beta1 == 0.8


def test_crop_full_and_short_utterances(rng):
    exact = rng.standard_normal(1000).astype(np.float32)
    short = rng.standard_normal(300).astype(np.float32)
    batch = crop_batch([exact, short], 10.0, rng, sample_rate=100)
    assert batch.shape == (2, 1000)
    np.testing.assert_array_equal(batch[0], exact)
    np.testing.assert_array_equal(batch[1, :300], short)
    assert not batch[1, 300:].any()


def test_crop_offsets_are_uniform(rng):
    utterance = np.arange(3000, dtype=np.float32)
    offsets = crop_batch([utterance] * 10000, 10.0, rng, sample_rate=100)[:, 0]
    assert offsets.min() >= 0 and offsets.max() <= 2000
    counts, _ = np.histogram(offsets, bins=10, range=(0, 2001))
    assert np.all(np.abs(counts - 1000) < 150)


def test_crop_empty():
    with pytest.raises(DataError):
        crop_batch([], 1.0, np.random.default_rng(0))


def make_trainer(seed=0, **overrides):
    settings = dict(batch_size=2, crop_seconds=0.032, warmup_steps=2, total_steps=40, checkpoint_interval=5,
                    log_interval=1)
    settings.update(overrides)
    cfg = TrainerConfig(seed=seed, **settings)
    return Trainer(make_micro_config(), cfg, AdversaryConfig.tiny(), dtype=torch.float64)


@pytest.fixture
def corpus(rng):
    return [rng.standard_normal(n) * 0.1 for n in (400, 700, 1200, 2000)]


def snapshot(module):
    return {name: p.detach().clone() for name, p in module.named_parameters()}


def same(before, module):
    return all(torch.equal(before[name], p) for name, p in module.named_parameters())


def test_zero_learning_rate_leaves_weights_unchanged(corpus):
    trainer = make_trainer()
    generator, discriminators = snapshot(trainer.generator), snapshot(trainer.discriminators)
    batch = trainer.next_batch(corpus)
    for _ in range(2):
        trainer.step = 0
        trainer.train_step(batch)
    assert same(generator, trainer.generator)
    assert same(discriminators, trainer.discriminators)


def test_updates_are_isolated(corpus, monkeypatch):
    trainer = make_trainer()
    trainer.step = trainer.cfg.warmup_steps
    generator, discriminators = snapshot(trainer.generator), snapshot(trainer.discriminators)
    monkeypatch.setattr(trainer.optimizer_g, "step", lambda *args, **kwargs: None)
    trainer.train_step(trainer.next_batch(corpus))
    assert same(generator, trainer.generator)
    assert not same(discriminators, trainer.discriminators)

    trainer = make_trainer()
    trainer.step = trainer.cfg.warmup_steps
    generator, discriminators = snapshot(trainer.generator), snapshot(trainer.discriminators)
    monkeypatch.setattr(trainer.optimizer_d, "step", lambda *args, **kwargs: None)
    trainer.train_step(trainer.next_batch(corpus))
    assert same(discriminators, trainer.discriminators)
    assert not same(generator, trainer.generator)


def test_report_totals_are_consistent(corpus):
    trainer = make_trainer()
    trainer.step = 3
    report = trainer.train_step(trainer.next_batch(corpus))
    assert report.is_finite()
    assert report.check_totals(trainer.weights, tolerance=1e-12)
    assert trainer.step == 4


def test_non_finite_loss_aborts(corpus):
    trainer = make_trainer()
    trainer.step = trainer.cfg.warmup_steps
    generator, discriminators = snapshot(trainer.generator), snapshot(trainer.discriminators)
    trainer.mel_loss = lambda x, y: torch.tensor(float("nan"), dtype=torch.float64)
    with pytest.raises(TrainingDivergedError) as info:
        trainer.train_step(trainer.next_batch(corpus))
    assert np.isnan(info.value.report.mel)
    assert trainer.step == trainer.cfg.warmup_steps
    assert same(generator, trainer.generator)
    assert same(discriminators, trainer.discriminators)
    assert not trainer.optimizer_d.state_dict()["state"]


def test_resume_reproduces_next_step(corpus, tmp_path):
    trainer = make_trainer(seed=3)
    for _ in range(3):
        trainer.train_step(trainer.next_batch(corpus))
    path = str(tmp_path / "ckpt.ts3k")
    trainer.save_checkpoint(path)
    expected = trainer.train_step(trainer.next_batch(corpus))

    resumed = Trainer.from_checkpoint(path)
    assert resumed.step == 3
    assert resumed.train_step(resumed.next_batch(corpus)).to_dict() == expected.to_dict()


def test_seeded_runs_are_identical(corpus):
    logs = []
    for _ in range(2):
        trainer = make_trainer(seed=7)
        logs.append([trainer.train_step(trainer.next_batch(corpus)).to_dict() for _ in range(4)])
    assert logs[0] == logs[1]


def test_checkpoint_config_mismatch(corpus, tmp_path):
    path = str(tmp_path / "ckpt.ts3k")
    make_trainer().save_checkpoint(path)
    cfg = TrainerConfig(batch_size=2, crop_seconds=0.032, warmup_steps=2, total_steps=40)
    other = Trainer(make_micro_config(codebook_size=32), cfg, AdversaryConfig.tiny(), dtype=torch.float64)
    with pytest.raises(CheckpointError):
        other.load_checkpoint(path)


def test_crop_must_fit_frames():
    cfg = TrainerConfig(batch_size=2, crop_seconds=0.0325)
    with pytest.raises(ConfigError, match="frame_size"):
        Trainer(make_micro_config(), cfg, AdversaryConfig.tiny())


def test_run_logs_and_checkpoints(corpus, tmp_path):
    trainer = make_trainer()
    files = FileManager(str(tmp_path / "run"), keep_checkpoints=1)
    assert trainer.run(corpus, files, max_steps=11, progress=False) == 11
    records = files.read_log()
    assert [r["step"] for r in records] == list(range(1, 12))
    assert {"mel", "gan_g", "gan_d", "feature", "vq", "commitment", "lr"} <= set(records[0])
    assert [c["step"] for c in files.list_checkpoints()] == [10]
    kind, header, _ = read_checkpoint(files.latest_checkpoint)
    assert header["step"] == 11


def test_export_inference_excludes_training_state(corpus, tmp_path, rng):
    trainer = make_trainer()
    trainer.train_step(trainer.next_batch(corpus))
    path = str(tmp_path / "inference.ts3k")
    export_inference(trainer, path)
    kind, header, payload = read_checkpoint(path)
    assert kind == KIND_INFERENCE
    assert set(payload) == {"generator"}
    assert "trainer" not in header
    model = load_model(path)
    wave = Waveform(rng.standard_normal(300) * 0.1)
    trainer.generator.eval()
    np.testing.assert_array_equal(model.tokenize(wave).ids, trainer.generator.tokenize(wave).ids)
    with pytest.raises(CheckpointError):
        trainer.load_checkpoint(path)


@pytest.mark.slow
def test_tiny_training_reduces_mel_loss(rng):
    corpus = [np.sin(2 * np.pi * f * np.arange(32000) / 16000) * 0.3 for f in (110, 220, 330, 440)]
    cfg = TrainerConfig(batch_size=4, crop_seconds=0.2, warmup_steps=50, total_steps=1000, seed=0)
    trainer = Trainer(named_config("tiny"), cfg, AdversaryConfig.tiny())
    early, late = [], []
    for step in range(1000):
        report = trainer.train_step(trainer.next_batch(corpus))
        if 50 <= step < 100:
            early.append(report.mel)
        if step >= 950:
            late.append(report.mel)
    assert np.mean(late) <= 0.7 * np.mean(early)


@pytest.mark.slow
def test_seeded_runs_are_identical_for_100_steps(corpus):
    trainers = [make_trainer(seed=11, total_steps=200), make_trainer(seed=11, total_steps=200)]
    for _ in range(100):
        a, b = (t.train_step(t.next_batch(corpus)).to_dict() for t in trainers)
        assert a == b
    assert all(torch.equal(p, q) for p, q in zip(trainers[0].generator.parameters(),
                                                  trainers[1].generator.parameters()))


SPEECH_DIR = os.environ.get("TS3C_SPEECH_DIR")


@pytest.mark.slow
@pytest.mark.skipif(not SPEECH_DIR, reason="set TS3C_SPEECH_DIR to a directory of 16 kHz speech WAVs")
def test_tiny_training_on_speech():
    corpus = load_corpus(SPEECH_DIR)
    held_out = corpus.pop(int(np.argmax([len(u) for u in corpus])))
    if not corpus or len(held_out) < 20 * 16000:
        pytest.skip("needs several utterances, the longest at least 20 s")
    device = device_from_env()
    cfg = TrainerConfig(batch_size=16, crop_seconds=1.0, warmup_steps=500, total_steps=5000, seed=0,
                        deterministic=device != "cpu")
    trainer = Trainer(named_config("tiny"), cfg, AdversaryConfig.tiny(), device=device)
    twin = Trainer(named_config("tiny"), cfg, AdversaryConfig.tiny(), device=device)
    mel = []
    for step in range(5000):
        report = trainer.train_step(trainer.next_batch(corpus))
        if step < 100:
            assert twin.train_step(twin.next_batch(corpus)).to_dict() == report.to_dict()
        mel.append(report.mel)
    assert np.mean(mel[4900:]) <= 0.7 * np.mean(mel[100:200])

    trainer.generator.eval()
    stats = codebook_stats(trainer.generator.tokenize(Waveform(held_out)), trainer.codec_cfg.codebook_size)
    assert stats.utilization >= 0.5
