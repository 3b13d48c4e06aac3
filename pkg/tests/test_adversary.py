import math

import numpy as np
import pytest
import torch

from core.adversary import AdversaryConfig, Discriminators, MultiScaleSTFTDiscriminator, fold_period
from core.errors import ConfigError, ShapeError
from core.losses import feature_matching_loss

LENGTH = 2048


@pytest.fixture
def discriminators():
    torch.manual_seed(0)
    return Discriminators(AdversaryConfig.tiny()).eval()


def expected_feature_shapes(cfg, length):
    shapes = []
    for period in cfg.periods:
        height, channels, maps = math.ceil(length / period), cfg.mpd_channels, []
        for stride in cfg.mpd_strides:
            height = (height - 1) // stride + 1
            maps.append((1, channels, height, period))
            channels = min(channels * 4, cfg.mpd_max_channels)
        shapes.append(maps)
    for window in cfg.stft_windows:
        frames, bins = length // (window // 4) + 1, window // 2 + 1
        maps = [(1, cfg.stft_channels, frames, bins)]
        for _ in range(3):
            bins = (bins - 1) // 2 + 1
            maps.append((1, cfg.stft_channels, frames, bins))
        maps.append((1, cfg.stft_channels, frames, bins))
        shapes.append(maps)
    return shapes


def test_fold_period_pads_tail():
    x = torch.arange(1, 11, dtype=torch.float32).unsqueeze(0)
    folded = fold_period(x, 3)
    assert folded.shape == (1, 1, 4, 3)
    assert folded[0, 0, 0].tolist() == [1.0, 2.0, 3.0]
    assert folded[0, 0, 3].tolist() == [10.0, 0.0, 0.0]


def test_discriminator_outputs():
    torch.manual_seed(0)
    cfg = AdversaryConfig.tiny()
    discriminators = Discriminators(cfg)
    out = discriminators(torch.randn(2, 1280))
    assert len(out.logits) == len(cfg.periods) + len(cfg.stft_windows)
    assert len(out.features) == len(out.logits)
    assert all(len(maps) == len(cfg.mpd_strides) for maps in out.features[:len(cfg.periods)])
    assert all(len(maps) == 5 for maps in out.features[len(cfg.periods):])
    assert all(logit.shape[0] == 2 for logit in out.logits)


def test_stft_discriminator_minimum_length():
    discriminator = MultiScaleSTFTDiscriminator(AdversaryConfig.tiny())
    with pytest.raises(ShapeError, match="512"):
        discriminator(torch.randn(1, 300))


def test_config_validation():
    with pytest.raises(ConfigError):
        AdversaryConfig(periods=[])
    with pytest.raises(ConfigError):
        AdversaryConfig(mpd_kernel_size=4)
    with pytest.raises(ConfigError, match="Unknown adversary field"):
        AdversaryConfig.from_dict({"scales": 3})
    cfg = AdversaryConfig.tiny()
    assert AdversaryConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.min_length == 512


def test_feature_shapes(discriminators):
    out = discriminators(torch.randn(1, LENGTH))
    shapes = [[tuple(m.shape) for m in maps] for maps in out.features]
    assert shapes == expected_feature_shapes(discriminators.cfg, LENGTH)
    assert [tuple(logit.shape) for logit in out.logits] == [
        (1, 1) + maps[-1][2:] for maps in shapes
    ]


def test_logits_finite_on_full_scale_inputs(discriminators, rng):
    inputs = torch.from_numpy(np.stack([
        rng.uniform(-1, 1, LENGTH),
        np.sign(np.sin(2 * np.pi * 50 * np.arange(LENGTH) / 16000)),
        np.ones(LENGTH),
        -np.ones(LENGTH),
    ])).float()
    with torch.no_grad():
        out = discriminators(inputs)
    assert all(torch.isfinite(logit).all() for logit in out.logits)


def test_silence_is_deterministic(discriminators):
    silence = torch.zeros(1, LENGTH)
    with torch.no_grad():
        a, b = discriminators(silence), discriminators(silence)
    assert all(torch.equal(x, y) for x, y in zip(a.logits, b.logits))


def test_identical_inputs_have_zero_feature_distance(discriminators):
    wave = torch.randn(2, LENGTH) * 0.1
    with torch.no_grad():
        real, fake = discriminators(wave), discriminators(wave.clone())
    for real_maps, fake_maps in zip(real.features, fake.features):
        assert feature_matching_loss([real_maps], [fake_maps]).item() == 0.0


def test_tone_and_noise_logits_differ(discriminators, rng):
    tone = torch.from_numpy(np.sin(2 * np.pi * 1000 * np.arange(LENGTH) / 16000) * 0.5).float()
    noise = torch.from_numpy(rng.uniform(-0.5, 0.5, LENGTH)).float()
    with torch.no_grad():
        a, b = discriminators(tone.unsqueeze(0)), discriminators(noise.unsqueeze(0))
    assert all(not torch.equal(x, y) for x, y in zip(a.logits, b.logits))


def test_single_waveform_gets_batch_dim(discriminators):
    wave = torch.randn(LENGTH) * 0.1
    with torch.no_grad():
        single, batched = discriminators(wave), discriminators(wave.unsqueeze(0))
    assert fold_period(wave, 3).shape == (1, 1, math.ceil(LENGTH / 3), 3)
    assert all(torch.equal(x, y) for x, y in zip(single.logits, batched.logits))
