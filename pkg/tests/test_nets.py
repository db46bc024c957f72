import numpy as np
import pytest
import torch

from ucan.core import ShapeMismatchError, ValidationError
from ucan.nets import (
    ChannelSE,
    Discriminator,
    DiscriminatorSpec,
    DuSEBlock,
    DuSEGenerator,
    GeneratorSpec,
    SpatialSE,
    generator_forward,
    generator_from_checkpoint,
    load_checkpoint,
    save_checkpoint,
    spec_dict,
    state_digest,
)

TINY_G = GeneratorSpec(depth=2, base_width=2, latent_res_blocks=1, se_reduction=2)
TINY_D = DiscriminatorSpec(base_width=2)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def tiny_g(seed=0):
    torch.manual_seed(seed)
    return DuSEGenerator(TINY_G).double()


def tiny_d(seed=0):
    torch.manual_seed(seed)
    return Discriminator(TINY_D).double()


def label(idx, shape, n=1):
    m = torch.zeros(n, 3, *shape, dtype=torch.float64)
    m[:, idx] = 1
    return m


# squeeze-and-excitation units


def test_channel_se_matches_numpy():
    torch.manual_seed(0)
    cse = ChannelSE(8, reduction=4).double()
    x = torch.randn(2, 8, 3, 4, 5, dtype=torch.float64)
    w1, b1 = cse.reduce.weight.detach().numpy(), cse.reduce.bias.detach().numpy()
    w2, b2 = cse.expand.weight.detach().numpy(), cse.expand.bias.detach().numpy()
    xn = x.numpy()
    s = xn.mean(axis=(2, 3, 4))
    g = sigmoid(np.maximum(s @ w1.T + b1, 0) @ w2.T + b2)
    np.testing.assert_allclose(cse(x).detach().numpy(), xn * g[:, :, None, None, None], atol=1e-12)
    assert cse.reduce.out_features == 2


def test_channel_se_zero_input():
    cse = ChannelSE(4, reduction=2).double()
    x = torch.zeros(1, 4, 2, 2, 2, dtype=torch.float64)
    b1, b2 = cse.reduce.bias.detach().numpy(), cse.expand.bias.detach().numpy()
    expected = sigmoid(cse.expand.weight.detach().numpy() @ np.maximum(b1, 0) + b2)
    np.testing.assert_allclose(cse.gate(x)[0].detach().numpy(), expected, atol=1e-12)
    assert (cse(x) == 0).all()


def test_spatial_se_matches_numpy():
    torch.manual_seed(1)
    sse = SpatialSE(5).double()
    x = torch.randn(1, 5, 3, 3, 3, dtype=torch.float64)
    w = sse.conv.weight.detach().numpy().reshape(5)
    b = sse.conv.bias.item()
    q = sigmoid(np.einsum("c,ncdhw->ndhw", w, x.numpy()) + b)
    np.testing.assert_allclose(sse(x).detach().numpy(), x.numpy() * q[:, None], atol=1e-12)


def test_spatial_se_zero_weights_halves_input():
    sse = SpatialSE(3).double()
    torch.nn.init.zeros_(sse.conv.weight)
    torch.nn.init.zeros_(sse.conv.bias)
    x = torch.randn(1, 3, 2, 2, 2, dtype=torch.float64)
    torch.testing.assert_close(sse(x), 0.5 * x)


def test_saturated_gates_pass_input_through():
    blk = DuSEBlock(4, reduction=2).double()
    with torch.no_grad():
        blk.cse.expand.weight.zero_()
        blk.cse.expand.bias.fill_(50.0)
        blk.sse.conv.weight.zero_()
        blk.sse.conv.bias.fill_(50.0)
    x = torch.randn(2, 4, 3, 3, 3, dtype=torch.float64)
    torch.testing.assert_close(blk(x), x, atol=1e-12, rtol=0)


@pytest.mark.parametrize("fusion", ["max", "add"])
def test_duse_fuses_branches(fusion):
    torch.manual_seed(2)
    blk = DuSEBlock(6, reduction=3, fusion=fusion).double()
    x = torch.randn(1, 6, 4, 4, 4, dtype=torch.float64)
    c, s = blk.cse(x), blk.sse(x)
    expected = torch.maximum(c, s) if fusion == "max" else c + s
    torch.testing.assert_close(blk(x), expected)


def test_se_units_gradcheck():
    torch.manual_seed(3)
    x = torch.randn(1, 4, 3, 3, 3, dtype=torch.float64, requires_grad=True)
    for m in (ChannelSE(4, 2).double(), SpatialSE(4).double(), DuSEBlock(4, 2, "add").double()):
        assert torch.autograd.gradcheck(m, (x,))


# generator


@pytest.mark.parametrize("shape", [(8, 8, 8), (16, 16, 16), (16, 32, 48), (32, 16, 8), (48, 64, 80), (12, 20, 24)])
def test_generator_preserves_shape(shape):
    g = tiny_g().eval()
    x = torch.randn(1, 1, *shape, dtype=torch.float64)
    with torch.no_grad():
        y = generator_forward(g, x, x, label(0, shape))
    assert y.shape == (1, 1, *shape)
    assert y.abs().max() <= 1


def test_generator_rejects_bad_inputs():
    g = tiny_g()
    with pytest.raises(ShapeMismatchError, match="divisible"):
        g(torch.zeros(1, 5, 16, 16, 18, dtype=torch.float64))
    with pytest.raises(ShapeMismatchError):
        g(torch.zeros(1, 4, 16, 16, 16, dtype=torch.float64))
    with pytest.raises(ShapeMismatchError):
        generator_forward(g, torch.zeros(1, 1, 8, 8, 8), torch.zeros(1, 1, 8, 8, 16), torch.zeros(1, 3, 8, 8, 8))
    with pytest.raises(ValidationError):
        GeneratorSpec(in_channels=4)


def test_generator_eval_is_deterministic():
    g = tiny_g().eval()
    x = torch.randn(2, 1, 16, 16, 16, dtype=torch.float64)
    with torch.no_grad():
        a = generator_forward(g, x, x, label(1, (16, 16, 16), 2))
        b = generator_forward(g, x, x, label(1, (16, 16, 16), 2))
    assert torch.equal(a, b)


def test_label_permutation_symmetry():
    """Relabelling domains and permuting the first-layer label weights leaves the output unchanged."""
    g = tiny_g().eval()
    shape = (16, 16, 16)
    x, mr = torch.randn(1, 1, *shape, dtype=torch.float64), torch.randn(1, 1, *shape, dtype=torch.float64)
    m = label(2, shape)
    perm = [2, 0, 1]
    with torch.no_grad():
        before = generator_forward(g, x, mr, m)
        conv = g.encoders[0][0]
        w = conv.weight.clone()
        conv.weight[:, 2:] = w[:, 2:][:, perm]
        after = generator_forward(g, x, mr, m[:, perm])
    torch.testing.assert_close(after, before, atol=1e-12, rtol=0)


def test_label_changes_output():
    g = tiny_g().eval()
    x = torch.randn(1, 1, 16, 16, 16, dtype=torch.float64)
    with torch.no_grad():
        a = generator_forward(g, x, x, label(0, (16, 16, 16)))
        b = generator_forward(g, x, x, label(1, (16, 16, 16)))
    assert not torch.allclose(a, b)


# discriminator


def test_discriminator_heads_64():
    d = tiny_d().eval()
    with torch.no_grad():
        scores, logits = d(torch.randn(2, 1, 64, 64, 64, dtype=torch.float64))
    assert scores.shape == (2, 1, 4, 4, 4)
    assert d.score_shape((64, 64, 64)) == (4, 4, 4)
    assert logits.shape == (2, 3)
    assert ((scores > 0) & (scores < 1)).all()
    torch.testing.assert_close(logits.softmax(-1).sum(-1), torch.ones(2, dtype=torch.float64))


@pytest.mark.parametrize("shape", [(32, 32, 32), (32, 48, 64), (40, 40, 56), (33, 35, 37)])
def test_discriminator_stride_arithmetic(shape):
    d = tiny_d().eval()
    with torch.no_grad():
        scores, _ = d(torch.randn(1, 1, *shape, dtype=torch.float64))
    expected = tuple(shape)
    for _ in range(4):
        expected = tuple((s + 2 * 1 - 4) // 2 + 1 for s in expected)
    assert tuple(scores.shape[2:]) == expected == d.score_shape(shape)


def test_discriminator_with_mr_channel():
    d = Discriminator(DiscriminatorSpec(in_channels=2, base_width=2))
    scores, logits = d(torch.randn(1, 2, 32, 32, 32))
    assert scores.shape == (1, 1, 2, 2, 2) and logits.shape == (1, 3)
    with pytest.raises(ShapeMismatchError):
        d(torch.randn(1, 1, 32, 32, 32))


# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    g = tiny_g()
    payload = {"generator_spec": spec_dict(TINY_G), "g_state": g.state_dict(), "config": {}}
    save_checkpoint(tmp_path / "c.pt", payload)
    g2 = generator_from_checkpoint(tmp_path / "c.pt").double()
    assert state_digest(g) == state_digest(g2)
    x = torch.randn(1, 1, 16, 16, 16, dtype=torch.float64)
    with torch.no_grad():
        torch.testing.assert_close(
            generator_forward(g.eval(), x, x, label(0, (16, 16, 16))),
            generator_forward(g2, x, x, label(0, (16, 16, 16))),
        )


def test_checkpoint_rejects_foreign_file(tmp_path):
    torch.save({"weights": 1}, tmp_path / "x.pt")
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "x.pt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")
