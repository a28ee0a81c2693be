import math

import numpy as np
import pytest
import torch

import voxcomp as vc
from voxcomp.errors import ShapeMismatch
from voxcomp.model import InrModel, embed_coords, normalize_coords
from conftest import small_model_config


# ---------------------------------------------------------------------------
# coordinate embedding
# ---------------------------------------------------------------------------

def test_embed_origin():
    out = embed_coords(torch.zeros(3), 2)
    assert torch.allclose(out, torch.tensor([0.0, 1.0, 0.0, 1.0] * 3))


def test_embed_unit_axis():
    out = embed_coords(torch.tensor([1.0, 0.0, 0.0]), 1)
    assert abs(out[0].item() - math.sin(math.pi)) < 1e-6
    assert abs(out[1].item() - (-1.0)) < 1e-7


def test_embed_matches_direct_trig():
    v = np.array([0.5, -0.25, 0.125])
    L = 10
    out = embed_coords(torch.tensor(v, dtype=torch.float64), L).numpy()
    assert out.shape == (60,)
    expected = []
    for axis in v:
        for f in range(L):
            angle = (2.0 ** f) * np.pi * axis
            expected.extend([np.sin(angle), np.cos(angle)])
    assert np.allclose(out, expected, atol=1e-12)


def test_normalize_coords_cell_centers():
    coords = np.array([[0, 0, 0], [15, 7, 3]])
    out = normalize_coords(coords, (16, 8, 4))
    assert torch.allclose(out[0], torch.tensor([-0.9375, -0.875, -0.75]))
    assert torch.allclose(out[1], torch.tensor([0.9375, 0.875, 0.75]))
    # strictly inside (-1, 1): the embedding aliases at the exact endpoints
    assert out.abs().max() < 1.0
    # singleton axes land on zero
    single = normalize_coords(np.array([[0, 0, 0]]), (1, 8, 4))
    assert single[0, 0] == 0.0
    # distinct voxels embed distinctly, including opposite corners
    emb = embed_coords(normalize_coords(np.array([[0, 0, 0], [15, 7, 3]]),
                                        (16, 8, 4)), 4)
    assert not torch.allclose(emb[0], emb[1])


# ---------------------------------------------------------------------------
# weight fields
# ---------------------------------------------------------------------------

def test_predict_weights_finite():
    torch.manual_seed(0)
    model = InrModel(small_model_config())
    w = model.predict_weights(torch.rand(5, 3) * 2 - 1)
    assert w.shape == (5, 4)
    assert torch.isfinite(w).all()


def test_predict_weights_distinguishes_coords_after_training():
    torch.manual_seed(1)
    model = InrModel(small_model_config(k=2, t=8))
    coords = torch.tensor([[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]])
    targets = torch.tensor([[1.0, -1.0], [-1.0, 1.0]])
    opt = torch.optim.Adamax(model.parameters(), lr=1e-2)
    for _ in range(50):
        opt.zero_grad()
        loss = torch.mean((model.predict_weights(coords) - targets) ** 2)
        loss.backward()
        opt.step()
    w = model.predict_weights(coords)
    assert not torch.allclose(w[0], w[1], atol=1e-3)


# ---------------------------------------------------------------------------
# pattern features / channel attention
# ---------------------------------------------------------------------------

def test_pattern_features_zero_bank_zero_bias():
    torch.manual_seed(2)
    model = InrModel(small_model_config())
    with torch.no_grad():
        model.bank.zero_()
        for enc in model.pattern_encoders:
            enc.conv1.bias.zero_()
            enc.conv2.bias.zero_()
    assert torch.count_nonzero(model.pattern_features()) == 0


def test_pattern_features_identity_encoder():
    torch.manual_seed(3)
    cfg = small_model_config(k=1, t=16, feat_channels=3)
    model = InrModel(cfg)
    with torch.no_grad():
        enc = model.pattern_encoders[0]
        enc.conv1.weight.zero_()
        enc.conv1.weight[:, 0, 1] = 1.0          # delta kernel, center tap
        enc.conv1.bias.zero_()
        enc.conv2.weight.zero_()
        for c in range(3):
            enc.conv2.weight[c, c, 1] = 1.0
        enc.conv2.bias.zero_()
        enc.act = torch.nn.Identity()            # linear activation for the test
    feats = model.pattern_features()
    expected = model.bank[0].detach()
    for c in range(3):
        assert torch.allclose(feats[c], expected)


def test_pattern_features_shape():
    torch.manual_seed(4)
    model = InrModel(small_model_config(k=4, t=64, feat_channels=8))
    assert model.pattern_features().shape == (32, 64)


def test_channel_attention_identity_and_linearity():
    torch.manual_seed(5)
    feats = torch.randn(8, 12)                   # K=4, C=2
    ones = torch.ones(1, 4)
    out = vc.channel_attention(ones, feats)
    assert torch.allclose(out[0], feats)

    one_hot = torch.zeros(1, 4)
    one_hot[0, 2] = 1.0
    gated = vc.channel_attention(one_hot, feats)[0]
    assert torch.count_nonzero(gated[:4]) == 0
    assert torch.allclose(gated[4:6], feats[4:6])
    assert torch.count_nonzero(gated[6:]) == 0

    assert torch.allclose(vc.channel_attention(2 * ones, feats)[0], 2 * feats)
    w1, w2 = torch.rand(1, 4), torch.rand(1, 4)
    additive = vc.channel_attention(w1 + w2, feats)
    assert torch.allclose(
        additive, vc.channel_attention(w1, feats) + vc.channel_attention(w2, feats),
        atol=1e-6,
    )


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("t", [50, 64, 100])
def test_fuse_output_length(t):
    torch.manual_seed(6)
    cfg = small_model_config(t=t)
    model = InrModel(cfg)
    modulated = torch.randn(3, cfg.k * cfg.feat_channels, cfg.t_pad)
    assert model.fuse(modulated).shape == (3, t)


def test_fuse_zero_input_zero_bias():
    torch.manual_seed(7)
    cfg = small_model_config(t=16)
    model = InrModel(cfg)
    with torch.no_grad():
        for conv in list(model.fusion.downs) + list(model.fusion.ups) + [model.fusion.final]:
            conv.bias.zero_()
    out = model.fuse(torch.zeros(2, cfg.k * cfg.feat_channels, cfg.t_pad))
    assert torch.count_nonzero(out) == 0


def test_fuse_shape_guard():
    torch.manual_seed(8)
    cfg = small_model_config(t=16)
    model = InrModel(cfg)
    with pytest.raises(ShapeMismatch):
        model.fuse(torch.zeros(2, 3, cfg.t_pad))
    with pytest.raises(ShapeMismatch):
        model.fuse(torch.zeros(2, cfg.k * cfg.feat_channels, cfg.t_pad + 1))


def test_fuse_gradient_matches_finite_differences():
    torch.manual_seed(9)
    cfg = vc.ModelConfig(k=2, t=8, embed_freqs=2, mlp_layers=2, mlp_width=4,
                         feat_channels=2, fusion_levels=2, fusion_width=4)
    model = InrModel(cfg).double()
    modulated = torch.randn(2, 4, 8, dtype=torch.float64)

    out = model.fuse(modulated).sum()
    out.backward()
    eps = 1e-3
    for name, p in model.fusion.named_parameters():
        grad = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        scale = float(grad.abs().max())
        idx = torch.randperm(len(flat))[:4]      # spot-check a few coordinates
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = model.fuse(modulated).sum().item()
            flat[i] = orig - eps
            lo = model.fuse(modulated).sum().item()
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            denom = max(abs(fd), abs(grad[i].item()), scale)
            assert abs(fd - grad[i].item()) / denom < 1e-3, name


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

def test_forward_shape_and_purity():
    torch.manual_seed(10)
    model = InrModel(small_model_config(t=50))
    coords = torch.rand(7, 3) * 2 - 1
    with torch.no_grad():
        a = model(coords)
        b = model(coords)
    assert a.shape == (7, 50)
    assert torch.equal(a, b)


def test_forward_linear_route_without_fusion():
    torch.manual_seed(11)
    model = InrModel(small_model_config(use_fusion=False))
    coords = torch.rand(5, 3) * 2 - 1
    with torch.no_grad():
        out = model(coords)
        expected = model.predict_weights(coords) @ model.bank
    assert torch.allclose(out, expected)
    assert not hasattr(model, "fusion")


def test_all_parameters_receive_gradients():
    torch.manual_seed(12)
    model = InrModel(small_model_config(t=16))
    coords = torch.rand(6, 3) * 2 - 1
    loss = (model(coords) ** 2).mean()
    loss.backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, name
        assert torch.count_nonzero(p.grad) > 0, name


@pytest.mark.parametrize("cfg_kwargs", [
    dict(k=4, t=64, embed_freqs=4, mlp_layers=3, mlp_width=16,
         feat_channels=2, fusion_levels=2, fusion_width=8),
    dict(k=2, t=50, embed_freqs=10, mlp_layers=5, mlp_width=64,
         feat_channels=8, fusion_levels=2, fusion_width=32),
    dict(k=3, t=33, embed_freqs=6, mlp_layers=4, mlp_width=24,
         feat_channels=4, fusion_levels=3, fusion_width=16, use_fusion=False),
])
def test_param_count_formula(cfg_kwargs):
    torch.manual_seed(13)
    model = InrModel(vc.ModelConfig(**cfg_kwargs))
    actual = sum(p.numel() for p in model.parameters())
    assert model.param_count() == actual


def test_t_pad_multiple():
    cfg = small_model_config(t=50, fusion_levels=3)
    assert cfg.t_pad == 56
    assert cfg.t_pad % 8 == 0
