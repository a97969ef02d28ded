import numpy as np
import pytest
import torch

from chunkspace.model import ChunkModel, FrozenDecoder, ModelConfig, build_decoder_mask, latent_time
from chunkspace.nn import DimensionError
from helpers import fd_max_rel_error, tiny_model_config


@pytest.mark.parametrize("k,expected", [(0, 0.0), (1, 10.0), (4, 40.0)])
def test_latent_time(k, expected):
    assert latent_time(k, 50, 5) == expected


@pytest.mark.parametrize("k", [-1, 5])
def test_latent_time_range(k):
    with pytest.raises(IndexError):
        latent_time(k, 50, 5)


def test_mask_rule_examples():
    # q0, latents 0..4, then an output query placed at time 6
    times = [0.0, 0.0, 10.0, 20.0, 30.0, 40.0, 6.0]
    mask = build_decoder_mask(times)
    assert mask[6, 1] and not mask[6, 2]
    assert mask[:, 0].all()


def test_mask_is_lower_triangular_after_sorting_by_time():
    times = np.array([0.0, 30.0, 10.0, 20.0, 5.0, 40.0])
    mask = build_decoder_mask(times)
    order = np.argsort(times)
    np.testing.assert_array_equal(mask[np.ix_(order, order)], np.tril(np.ones((6, 6), dtype=bool)))


def test_query_tokens_only_see_themselves_among_queries():
    mask = build_decoder_mask([0.0, 0.0, 3.0, 1.0, 4.0], [False, False, False, True, True])
    assert mask[4, 4] and not mask[4, 3] and not mask[0, 3]
    assert mask[4, 2] and mask[3, 1] and not mask[3, 2]


@pytest.fixture(scope="module")
def desk_model():
    torch.manual_seed(0)
    model = ChunkModel(ModelConfig(), seed=3).eval()
    # spread codes so that different code choices give clearly different outputs
    model.codebook.codes.normal_(0.0, 2.0)
    return model


def _batch(cfg, B=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(B, cfg.dof, generator=g), torch.randn(B, cfg.n, cfg.dof, generator=g)


def test_encoder_output_shape_and_sensitivity(desk_model):
    cfg = desk_model.cfg
    q0, chunk = _batch(cfg)
    z = desk_model.encode_raw(q0, chunk)
    assert z.shape == (4, cfg.m, cfg.d_latent)
    assert not torch.allclose(z[0], z[1])


def test_encoder_shape_errors(desk_model):
    with pytest.raises(DimensionError):
        desk_model.encode_raw(torch.zeros(2, 11), torch.zeros(2, 49, 11))


def test_unconditional_model_ignores_q0():
    model = ChunkModel(tiny_model_config(conditional=False)).eval()
    q0, chunk = _batch(model.cfg)
    z = torch.randn(4, model.cfg.m, model.cfg.d_latent)
    with torch.no_grad():
        assert torch.equal(model.encode_raw(q0, chunk), model.encode_raw(q0 + 5.0, chunk))
        assert torch.equal(model.decode(q0, z), model.decode(-q0, z))


def test_decode_shapes_and_query_range(desk_model):
    cfg = desk_model.cfg
    q0, _ = _batch(cfg, B=2)
    with torch.no_grad():
        assert desk_model.decode_indices(q0, torch.zeros(2, cfg.m, dtype=torch.long)).shape == (2, cfg.n, cfg.dof)
        assert desk_model.decode_indices(q0, torch.zeros(2, cfg.m, dtype=torch.long), [3, 7]).shape == (2, 2, cfg.dof)
        with pytest.raises(IndexError):
            desk_model.decode_indices(q0, torch.zeros(2, cfg.m, dtype=torch.long), [cfg.n])


@pytest.mark.parametrize("k", range(5))
def test_changing_slot_k_leaves_earlier_steps_bit_identical(desk_model, k):
    cfg = desk_model.cfg
    q0, _ = _batch(cfg, B=1)
    base = torch.tensor([[0, 1, 2, 3, 0]])
    other = base.clone()
    other[0, k] = (base[0, k] + 1) % cfg.K
    with torch.no_grad():
        a = desk_model.decode_indices(q0, base)
        b = desk_model.decode_indices(q0, other)
    cut = int(latent_time(k, cfg.n, cfg.m))
    assert torch.equal(a[:, :cut], b[:, :cut])
    assert not torch.equal(a[:, cut:], b[:, cut:])


def test_decoding_a_subset_of_steps_matches_the_full_decode(desk_model):
    cfg = desk_model.cfg
    q0, _ = _batch(cfg, B=3)
    idx = torch.tensor([[0, 1, 2, 3, 1], [3, 3, 0, 1, 2], [1, 1, 1, 1, 1]])
    with torch.no_grad():
        full = desk_model.decode_indices(q0, idx)
        part = desk_model.decode_indices(q0, idx, [0, 17, 49])
    torch.testing.assert_close(part, full[:, [0, 17, 49]], rtol=0, atol=1e-6)


def test_frozen_decoder_matches_model(desk_model):
    dec = FrozenDecoder(desk_model)
    q0, _ = _batch(desk_model.cfg, B=1)
    out = dec.decode_codes(q0.numpy()[0], np.array([1, 2, 0, 3, 1]), [0, 1, 2])
    with torch.no_grad():
        ref = desk_model.decode_indices(q0, torch.tensor([[1, 2, 0, 3, 1]]), [0, 1, 2]).double().numpy()
    np.testing.assert_array_equal(out, ref)
    assert out.dtype == np.float64


def test_loss_is_zero_for_perfect_reconstruction():
    model = ChunkModel(tiny_model_config()).double().eval()
    cfg = model.cfg
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    q0 = torch.randn(1, cfg.dof, dtype=torch.float64)
    chunk = q0[:, None, :].repeat(1, cfg.n, 1)
    with torch.no_grad():
        z = model.encode_raw(q0, chunk)[0]
        model.codebook.codes[:cfg.m] = z
    with torch.no_grad():
        loss, parts = model.loss(q0, chunk)
    assert float(loss) == 0.0 and float(parts["commit"]) == 0.0


def test_zero_commitment_weight_leaves_reconstruction_only():
    model = ChunkModel(tiny_model_config(commit_weight=0.0)).double()
    q0, chunk = (t.double() for t in _batch(model.cfg))
    loss, parts = model.loss(q0, chunk)
    assert float(loss.detach()) == float(parts["recon"].detach())
    assert float(parts["commit"].detach()) > 0.0


def test_full_vq_loss_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = ChunkModel(tiny_model_config()).double()
    model.codebook.codes.normal_()
    q0, chunk = (t.double() for t in _batch(model.cfg, B=3))
    decoder_side = [p for n, p in model.named_parameters() if n.startswith(("dec_", "decoder", "head"))]
    assert fd_max_rel_error(lambda: model.loss(q0, chunk)[0], decoder_side) < 1e-4

    # encoder side: the oracle is the same loss with the quantization offset frozen at the base point
    with torch.no_grad():
        raw = model.encode_raw(q0, chunk)
        B, m, d = raw.shape
        _, zq = model.codebook.quantize(raw.reshape(B * m, d))
        offset = zq.reshape(B, m, d) - raw
        zq = zq.reshape(B, m, d)

    def frozen():
        z = model.encode_raw(q0, chunk)
        recon = (model.decode(q0, z + offset) - chunk).abs().mean()
        return recon + model.cfg.commit_weight * ((z - zq) ** 2).mean()

    encoder_side = [p for n, p in model.named_parameters() if n.startswith(("enc_", "encoder", "to_latent"))]
    for p in encoder_side:
        p.grad = None
    model.loss(q0, chunk)[0].backward()
    analytic = [p.grad.clone() for p in encoder_side]
    assert fd_max_rel_error(frozen, encoder_side) < 1e-4
    for a, p in zip(analytic, encoder_side):
        torch.testing.assert_close(a, p.grad, rtol=1e-10, atol=1e-12)


def test_full_kl_loss_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = ChunkModel(tiny_model_config(quantization="kl")).double().train()
    q0, chunk = (t.double() for t in _batch(model.cfg, B=3))

    def loss():
        return model.loss(q0, chunk, generator=torch.Generator().manual_seed(5))[0]

    assert fd_max_rel_error(loss, list(model.parameters())) < 1e-4


def test_kl_model_is_deterministic_at_inference():
    model = ChunkModel(tiny_model_config(quantization="kl")).eval()
    q0, chunk = _batch(model.cfg)
    a = model.loss(q0, chunk, generator=torch.Generator().manual_seed(1))[0]
    b = model.loss(q0, chunk, generator=torch.Generator().manual_seed(2))[0]
    assert float(a.detach()) == float(b.detach())


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n=50, m=7)
    with pytest.raises(ValueError):
        ModelConfig(K=1)
    with pytest.raises(ValueError):
        ModelConfig(quantization="gumbel")
    big = ModelConfig.full_scale()
    assert (big.d_model, big.layers, big.heads, big.d_ff) == (128, 3, 4, 512)
