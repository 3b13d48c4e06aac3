import numpy as np
import pytest
import torch

from core.errors import ConfigError, DataError, TokenError
from core.framing import Waveform, frame
from core.model import (
    CodecConfig, Codebook, EncoderStem, FactorizedQuantizer, TokenSequence, TS3Codec, named_config,
    param_breakdown, param_count, quantize,
)
from core.xformer import TransformerConfig


def test_named_configs():
    x1, x2, x3, x4, x5 = (named_config(f"X{i}") for i in range(1, 6))
    assert (x1.frame_size, x1.bits_per_token, x1.transformer.window) == (320, 16, 32)
    assert (x2.frame_size, x2.bits_per_token) == (320, 17)
    assert (x3.frame_size, x3.bits_per_token, x3.transformer.window) == (400, 16, 16)
    assert x4.bits_per_token == 17
    assert (x5.transformer.num_layers, x5.transformer.ffn_dim) == (10, 2048)
    assert x1.stem_shapes == {"E-1": (320, 768), "E-2": (768, 1024), "D-1": (1024, 768), "D-2": (768, 320)}
    assert x3.stem_shapes["E-1"] == (400, 1024)


def test_unknown_config_lists_valid_ids():
    with pytest.raises(ConfigError, match="X1"):
        named_config("X9")


def test_from_dict_merges_over_preset():
    assert CodecConfig.from_dict({"config_id": "X1"}) == named_config("X1")
    custom = CodecConfig.from_dict({"config_id": "X1", "codebook_size": 8192})
    assert custom.config_id == "custom"
    assert custom.codebook_size == 8192 and custom.frame_size == 320
    assert CodecConfig.from_dict(named_config("tiny").to_dict()) == named_config("tiny")
    with pytest.raises(ConfigError, match="Unknown codec field"):
        CodecConfig.from_dict({"config_id": "X1", "hop": 3})


def test_param_count_of_hand_countable_config():
    cfg = CodecConfig(frame_size=2, encoder_mid_dim=4, encoder_out_dim=4, decoder_in_dim=4, decoder_mid_dim=4,
                      transformer=TransformerConfig(num_layers=1, embed_dim=4, num_heads=1, ffn_dim=8, window=2),
                      codebook_size=4, codebook_dim=2)
    assert param_count(cfg) == 430
    assert sum(param_breakdown(cfg).values()) == 430


@pytest.mark.parametrize("config_id, reported", [("X1", 203.6e6), ("X3", 204.4e6), ("X4", 204.4e6)])
def test_param_count_close_to_reported(config_id, reported):
    assert abs(param_count(named_config(config_id)) - reported) / reported < 0.02


def test_nearest_matches_exhaustive_search(rng):
    torch.manual_seed(0)
    codebook = Codebook(4096, 8).double()
    queries = torch.from_numpy(rng.standard_normal((1000, 8)) * 0.3)
    table = codebook.embeddings.detach().numpy()
    expected = np.argmin(((queries.numpy()[:, None, :] - table[None]) ** 2).sum(-1), axis=1)
    np.testing.assert_array_equal(codebook.nearest(queries).numpy(), expected)


def test_ties_go_to_lowest_index():
    codebook = Codebook(6, 2).double()
    with torch.no_grad():
        codebook.embeddings.copy_(torch.tensor([[3.0, 3.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0],
                                                [0.0, -1.0], [1.0, 0.0]], dtype=torch.float64))
    queries = torch.tensor([[0.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    assert codebook.nearest(queries).tolist() == [1, 1]


def test_float32_ties_go_to_lowest_index(rng):
    codebook = Codebook(16, 2)
    grid = rng.integers(-1280, 1281, size=(2000, 2)).astype(np.float32) / 64
    table = np.full((16, 2), 200.0, dtype=np.float32) + np.arange(16, dtype=np.float32)[:, None]
    for base in grid:
        table[3] = base + np.float32([0.25, 0.0])
        table[9] = base - np.float32([0.25, 0.0])
        with torch.no_grad():
            codebook.embeddings.copy_(torch.from_numpy(table))
        assert int(codebook.nearest(torch.from_numpy(base[None]))[0]) == 3


def test_quantize_single_latent():
    torch.manual_seed(0)
    quantizer = FactorizedQuantizer(16, 32, 4).double()
    latent = torch.randn(16, dtype=torch.float64)
    token, vector = quantize(quantizer.codebook, quantizer.down_proj, latent)
    low = quantizer.down_proj(latent)
    distances = ((quantizer.codebook.embeddings - low) ** 2).sum(1)
    assert token == int(distances.argmin())
    assert torch.equal(vector, quantizer.codebook.embeddings[token])
    with pytest.raises(DataError):
        quantize(quantizer.codebook, quantizer.down_proj, torch.full((16,), float("nan"), dtype=torch.float64))


def test_straight_through_gradient():
    torch.manual_seed(0)
    quantizer = FactorizedQuantizer(16, 32, 4).double()
    latents = torch.randn(1, 5, 16, dtype=torch.float64, requires_grad=True)
    out = quantizer(latents)
    out.quantized.sum().backward()
    assert quantizer.codebook.embeddings.grad is None
    assert latents.grad is not None and latents.grad.abs().sum() > 0
    torch.testing.assert_close(out.quantized, quantizer.up_proj(out.post_quant))


def test_round_trip_length(micro_model, rng):
    wave = Waveform(rng.standard_normal(100) * 0.1)
    tokens = micro_model.tokenize(wave)
    assert len(tokens) == 7
    assert tokens.original_length == 100
    assert len(micro_model.decode(tokens)) == 100


def test_encode_frame_matrix(micro_model, rng):
    frames = frame(Waveform(rng.standard_normal(64)), 16)
    latents = micro_model.encode(frames)
    assert latents.shape == (16, 4)


def test_token_causality(micro_model, rng):
    samples = rng.standard_normal(160) * 0.1
    perturbed = samples.copy()
    perturbed[64:] = rng.standard_normal(96)
    a = micro_model.tokenize(Waveform(samples)).ids
    b = micro_model.tokenize(Waveform(perturbed)).ids
    np.testing.assert_array_equal(a[:4], b[:4])


def test_forward_shapes(micro_model):
    batch = torch.randn(3, 64, dtype=torch.float64)
    out = micro_model(batch)
    assert out.reconstruction.shape == batch.shape
    assert out.pre_quant.shape == out.post_quant.shape == (3, 4, 4)
    assert out.ids.shape == (3, 4)


def test_invalid_tokens(micro_model):
    tokens = TokenSequence(ids=[1, 2, 64], frame_rate=1000.0, original_length=48)
    with pytest.raises(TokenError, match="position 2"):
        tokens.validate(64)
    with pytest.raises(TokenError):
        micro_model.decode(tokens)
    with pytest.raises(TokenError, match="expected 3"):
        TokenSequence(ids=[1, 2], frame_rate=1000.0, original_length=48).validate(64, frame_size=16)


def test_decoder_receptive_field(micro_model, rng):
    tokens = micro_model.tokenize(Waveform(rng.standard_normal(16 * 12) * 0.1))
    bound = micro_model.cfg.transformer.receptive_field
    changed = tokens.ids.copy()
    changed[1] = (changed[1] + 1) % micro_model.cfg.codebook_size
    a = micro_model.decode(tokens).samples.reshape(12, 16)
    b = micro_model.decode(TokenSequence(changed, tokens.frame_rate, tokens.original_length)).samples.reshape(12, 16)
    assert bound == 7
    np.testing.assert_array_equal(a[1 + bound:], b[1 + bound:])
    np.testing.assert_array_equal(a[:1], b[:1])
    assert not np.array_equal(a[1], b[1])


def test_decode_is_deterministic(micro_model, rng):
    tokens = micro_model.tokenize(Waveform(rng.standard_normal(200) * 0.1))
    np.testing.assert_array_equal(micro_model.decode(tokens).samples, micro_model.decode(tokens).samples)


def test_zero_frame_isolates_stem_bias():
    torch.manual_seed(0)
    stem = EncoderStem(named_config("X1"))
    with torch.no_grad():
        out = stem(torch.zeros(1, 320))
    assert isinstance(stem.connector, torch.nn.Identity)
    assert stem.first.bias is None
    assert torch.equal(out[0], stem.second.bias.detach())


@pytest.mark.parametrize("config_id, frame_size, frames", [("X1", 320, 50), ("X3", 400, 40)])
def test_full_size_latent_shapes(config_id, frame_size, frames):
    with torch.device("meta"):
        model = TS3Codec(named_config(config_id))
        latents = model.encode_frames(torch.empty(1, 16000 // frame_size, frame_size))
    assert frames * frame_size == 16000
    assert tuple(latents[0].T.shape) == (1024, frames)
