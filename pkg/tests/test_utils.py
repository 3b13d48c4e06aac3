import json

import numpy as np
import pytest
from scipy.io import wavfile

from core.errors import ConfigError, DataError
from core.framing import Waveform
from utils.audio_io import float_to_pcm_bytes, load_wav, pcm_bytes_to_float, save_wav
from utils.file_manager import FileManager, apply_overrides, load_config, parse_override, write_atomic


def test_parse_override_values():
    assert parse_override("trainer.batch_size=16") == ("trainer", "batch_size", 16)
    assert parse_override("codec.config_id=X3") == ("codec", "config_id", "X3")
    assert parse_override("adversary.periods=[2, 3]") == ("adversary", "periods", [2, 3])
    assert parse_override("trainer.deterministic=true") == ("trainer", "deterministic", True)


@pytest.mark.parametrize("text", ["batch_size=16", "trainer.batch_size", "model.layers=2", "trainer.=1"])
def test_parse_override_rejects(text):
    with pytest.raises(ConfigError):
        parse_override(text)


def test_load_config_merges_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"codec": {"config_id": "X1"}, "trainer": {"batch_size": 4}}))
    config = load_config(str(path), ["trainer.batch_size=8", "adversary.stft_channels=4"])
    assert config == {"codec": {"config_id": "X1"}, "trainer": {"batch_size": 8},
                      "adversary": {"stft_channels": 4}}
    assert load_config() == {"codec": {}, "trainer": {}, "adversary": {}}
    assert apply_overrides({}, []) == load_config()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="Unknown config section"):
        path = tmp_path / "extra.json"
        path.write_text(json.dumps({"optimizer": {}}))
        load_config(str(path))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError, match="Malformed"):
        load_config(str(broken))
    with pytest.raises(ConfigError, match="Cannot read"):
        load_config(str(tmp_path / "missing.json"))


def test_write_atomic_leaves_no_temp_file(tmp_path):
    path = tmp_path / "nested" / "blob.bin"
    write_atomic(str(path), b"abc")
    write_atomic(str(path), b"xyz")
    assert path.read_bytes() == b"xyz"
    assert not (tmp_path / "nested" / "blob.bin.tmp").exists()


def test_checkpoint_rotation(tmp_path):
    files = FileManager(str(tmp_path / "run"), keep_checkpoints=2)
    for step in (5, 10, 15):
        write_atomic(files.checkpoint_path(step), b"x")
    write_atomic(files.latest_checkpoint, b"x")
    files.cleanup_old_checkpoints()
    assert [c["step"] for c in files.list_checkpoints()] == [15, 10]
    assert (tmp_path / "run" / "latest.ts3k").exists()


def test_log_truncation(tmp_path):
    files = FileManager(str(tmp_path / "run"))
    for step in range(1, 6):
        files.append_log({"step": step, "mel": 1.0 / step})
    files.truncate_log(3)
    assert [r["step"] for r in files.read_log()] == [1, 2, 3]


def test_has_run(tmp_path):
    files = FileManager(str(tmp_path / "run"))
    assert not files.has_run
    write_atomic(files.checkpoint_path(4), b"x")
    assert files.has_run
    assert FileManager(str(tmp_path / "other")).has_run is False
    files = FileManager(str(tmp_path / "logged"))
    files.append_log({"step": 1})
    assert files.has_run


def test_wav_round_trip_is_exact(tmp_path, rng):
    samples = rng.integers(-32768, 32767, size=800).astype(np.float64) / 32768.0
    path = str(tmp_path / "a.wav")
    save_wav(path, Waveform(samples))
    loaded = load_wav(path)
    assert loaded.samples.dtype == np.float32
    np.testing.assert_array_equal(loaded.samples, samples.astype(np.float32))


def test_stereo_is_downmixed(tmp_path):
    left = np.full(100, 8192, dtype=np.int16)
    right = np.full(100, -4096, dtype=np.int16)
    path = str(tmp_path / "stereo.wav")
    wavfile.write(path, 16000, np.stack([left, right], axis=1))
    np.testing.assert_allclose(load_wav(path).samples, np.full(100, 0.0625), atol=1e-7)


def test_other_rates_are_resampled(tmp_path):
    path = str(tmp_path / "narrow.wav")
    t = np.arange(4000) / 8000
    wavfile.write(path, 8000, (0.3 * np.sin(2 * np.pi * 300 * t)).astype(np.float32))
    wave = load_wav(path)
    assert len(wave) == 8000
    spectrum = np.abs(np.fft.rfft(wave.samples))
    assert np.argmax(spectrum) * 16000 / 8000 == pytest.approx(300, abs=2)


def test_unreadable_or_empty_wav(tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"RIFF....")
    with pytest.raises(DataError):
        load_wav(str(bad))
    empty = str(tmp_path / "empty.wav")
    wavfile.write(empty, 16000, np.zeros(0, dtype=np.int16))
    with pytest.raises(DataError, match="no samples"):
        load_wav(empty)


def test_pcm_bytes():
    samples = np.array([0.0, 0.5, -0.5, 1.0, -1.0])
    data = float_to_pcm_bytes(samples)
    assert data == np.array([0, 16384, -16384, 32767, -32768], dtype="<i2").tobytes()
    np.testing.assert_array_equal(pcm_bytes_to_float(data)[:3], [0.0, 0.5, -0.5])
    with pytest.raises(DataError, match="odd"):
        pcm_bytes_to_float(b"\x00")
