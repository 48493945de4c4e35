import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_gradients, tiny_decoder
from heightformer.config import DecoderConfig
from heightformer.decoder import (
    BinSet,
    ConvBlock,
    HeightGenerator,
    ProbabilityVolume,
    QueryTransformerBlock,
    bin_values,
    fixed_bin_values,
    height_regression,
    init_height_queries,
    regress_normalized,
)


def test_queries_shape_determinism_and_truncation():
    g1, g2 = torch.Generator().manual_seed(3), torch.Generator().manual_seed(3)
    a, b = init_height_queries(64, 128, g1), init_height_queries(64, 128, g2)
    assert a.shape == (64, 128)
    assert torch.equal(a, b)
    assert a.abs().max() <= 0.04


def test_queries_are_checkpointed_parameters():
    dec = HeightGenerator(tiny_decoder(4), in_channels=8)
    assert "queries" in dict(dec.named_parameters())
    assert "queries" in dec.state_dict()


# -- transformer block ---------------------------------------------------------

def test_transformer_block_shapes():
    block = QueryTransformerBlock(8, 2, 16, feat_channels=6, token_cap=4)
    q = torch.randn(2, 4, 8)
    for hw in [(1, 1), (3, 3), (16, 16)]:
        assert block(q, torch.randn(2, 6, *hw)).shape == (2, 4, 8)


def test_token_cap_pools():
    block = QueryTransformerBlock(8, 2, 16, feat_channels=3, token_cap=576)
    assert block.tokens(torch.randn(1, 3, 448, 448)).shape == (1, 576, 8)
    assert block.tokens(torch.randn(1, 3, 10, 10)).shape == (1, 100, 8)


def test_cross_attention_over_identical_tokens():
    torch.manual_seed(0)
    block = QueryTransformerBlock(8, 2, 16, feat_channels=5, token_cap=16)
    feat = torch.randn(1, 5, 1, 1).expand(1, 5, 3, 3)
    q = torch.randn(1, 4, 8)
    mem = block.tokens(feat)
    ca = block.cross(q, mem)
    value = block.cross.proj(block.cross.kv(mem[:, :1])[..., 8:])
    torch.testing.assert_close(ca, value.expand_as(ca), atol=1e-6, rtol=0)


def test_transformer_block_width_mismatch():
    block = QueryTransformerBlock(8, 2, 16, feat_channels=5, token_cap=16)
    with pytest.raises(ValueError, match="token width"):
        block(torch.randn(1, 4, 8), torch.randn(1, 6, 3, 3))


def test_transformer_block_gradient():
    torch.manual_seed(1)
    block = QueryTransformerBlock(8, 2, 16, feat_channels=6, token_cap=16).double()
    q = torch.randn(1, 4, 8, dtype=torch.float64, requires_grad=True)
    feat = torch.randn(1, 6, 3, 3, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 4, 8, dtype=torch.float64)
    assert check_gradients(lambda: (block(q, feat) * w).sum(), [q, feat]) < 1e-4


# -- conv pyramid --------------------------------------------------------------

def test_conv_block_schedule():
    n = 4
    H = W = 64
    c1, c2, c3 = 16 * n, 4 * n, n
    y = torch.randn(1, 256 * n, H // 16, W // 16)
    p1 = ConvBlock(256 * n, c1, 8, 1)(y)
    p2 = ConvBlock(c1, c2, 8, 4)(p1)
    p3 = ConvBlock(c2, c3, 8, 4)(p2)
    assert p1.shape == (1, c1, H // 16, W // 16)
    assert p2.shape == (1, c2, H // 4, W // 4)
    assert p3.shape == (1, c3, H, W)


def test_conv_block_relu_stage_nonnegative():
    block = ConvBlock(6, 3, 5, 4)
    assert (block.hidden(torch.randn(2, 6, 4, 4)) >= 0).all()


def test_conv_block_rejects_wrong_channels():
    with pytest.raises(ValueError):
        ConvBlock(6, 3, 5, 1)(torch.randn(1, 7, 4, 4))


# -- regression ----------------------------------------------------------------

def test_single_bin_gives_max_height():
    hm = height_regression(torch.randn(2, 1), torch.randn(2, 1, 3, 3), 10.0, 20.0)
    torch.testing.assert_close(hm.values, torch.full((2, 3, 3), 20.0))


def test_two_uniform_bins_give_midpoint():
    hm = height_regression(torch.zeros(1, 2), torch.zeros(1, 2, 4, 4), 240.70033, 360.0037)
    torch.testing.assert_close(hm.values, torch.full((1, 4, 4), 300.352015), atol=1e-4, rtol=0)


def test_regression_within_range_random():
    g = torch.Generator().manual_seed(0)
    for _ in range(50):
        bins = torch.randn(3, 16, generator=g) * 10
        prob = torch.randn(3, 16, 5, 5, generator=g) * 10
        v = height_regression(bins, prob, -17.355, 106.171).values
        assert v.min() >= -17.355 - 1e-4 and v.max() <= 106.171 + 1e-4


def test_regression_errors():
    with pytest.raises(ValueError):
        height_regression(torch.zeros(1, 3), torch.zeros(1, 4, 2, 2), 0, 1)
    with pytest.raises(ValueError):
        height_regression(torch.zeros(1, 3), torch.zeros(1, 3, 2, 2), 1, 1)


def test_monotone_response_on_dominant_bin():
    g = torch.Generator().manual_seed(1)
    for i in range(6):
        bins = torch.randn(1, 6, generator=g)
        prob = torch.randn(1, 6, 2, 2, generator=g)
        prob[:, i] += 8.0  # mass concentrated on bin i
        base = regress_normalized(bin_values(bins), prob)
        for delta in (0.1, 1.0, 5.0):
            bumped = bins.clone()
            bumped[0, i] += delta
            assert (regress_normalized(bin_values(bumped), prob) >= base - 1e-7).all()


def test_bin_center_mode_in_unit_interval():
    values = bin_values(torch.randn(2, 10), "bin-centers")
    assert (values > 0).all() and (values < 1).all()
    assert (values[:, 1:] > values[:, :-1]).all()


def test_fixed_bin_values():
    torch.testing.assert_close(fixed_bin_values(5), torch.tensor([0.0, 0.25, 0.5, 0.75, 1.0]))
    log = fixed_bin_values(5, "log")
    assert log[0] == 0 and abs(log[-1] - 1) < 1e-6 and (log[1:] > log[:-1]).all()


# -- full decoder --------------------------------------------------------------

def test_full_size_decoder_shapes():
    cfg = DecoderConfig(n_bins=64)
    dec = HeightGenerator(cfg, in_channels=256 * 64).eval()
    with torch.no_grad():
        bins, prob = dec(torch.randn(1, 256 * 64, 28, 28))
        hm = height_regression(bins, prob, 0.0, 1.0)
    assert bins.logits.shape == (1, 64)
    assert prob.logits.shape == (1, 64, 448, 448)
    assert hm.values.shape == (1, 448, 448)
    assert prob.levels == ((1024, 28, 28), (256, 112, 112), (64, 448, 448))


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4))
def test_shape_schedule_any_size(a, b):
    n = 2
    dec = HeightGenerator(tiny_decoder(n), in_channels=12).eval()
    with torch.no_grad():
        _, prob = dec(torch.randn(1, 12, a, b))
    H, W = 16 * a, 16 * b
    assert prob.levels == ((16 * n, a, b), (4 * n, H // 4, W // 4), (n, H, W))


def test_probability_and_bin_normalization():
    dec = HeightGenerator(tiny_decoder(4), in_channels=8).eval()
    with torch.no_grad():
        bins, prob = dec(torch.randn(2, 8, 2, 2))
    torch.testing.assert_close(prob.logits.softmax(1).sum(1), torch.ones(2, 32, 32), atol=1e-5, rtol=0)
    torch.testing.assert_close(bins.logits.softmax(-1).sum(-1), torch.ones(2), atol=1e-6, rtol=0)


def test_bins_are_image_adaptive_and_deterministic():
    dec = HeightGenerator(tiny_decoder(4), in_channels=8).eval()
    y1, y2 = torch.randn(1, 8, 2, 2), torch.randn(1, 8, 2, 2)
    with torch.no_grad():
        a, b, a2 = dec(y1)[0].logits, dec(y2)[0].logits, dec(y1)[0].logits
    assert torch.equal(a, a2)
    assert not torch.allclose(a, b)


def test_fixed_bin_ablation_flag():
    adaptive = HeightGenerator(tiny_decoder(4), in_channels=8).eval()
    fixed = HeightGenerator(tiny_decoder(4, fixed_bins=True), in_channels=8).eval()
    fixed.load_state_dict(adaptive.state_dict())
    y = torch.randn(2, 8, 2, 2)
    with torch.no_grad():
        (fb, fp), (ab, ap) = fixed(y), adaptive(y)
    assert fb.fixed and not ab.fixed
    torch.testing.assert_close(fb.logits, torch.tensor([0.0, 1 / 3, 2 / 3, 1.0]).expand(2, 4))
    assert torch.equal(fp.logits, ap.logits)
    hm = height_regression(fb, fp, 0.0, 3.0)
    expected = 3.0 * (fp.logits.softmax(1) * torch.tensor([0.0, 1 / 3, 2 / 3, 1.0]).view(1, 4, 1, 1)).sum(1)
    torch.testing.assert_close(hm.values, expected)


def test_decoder_rejects_wrong_input():
    dec = HeightGenerator(tiny_decoder(4), in_channels=8)
    with pytest.raises(ValueError):
        dec(torch.randn(1, 9, 2, 2))


def test_full_decoder_gradient():
    torch.manual_seed(2)
    cfg = DecoderConfig(n_bins=4, query_dim=8, query_heads=2, ffn_dim=16, conv_hidden=4, token_cap=16)
    dec = HeightGenerator(cfg, in_channels=8).double()
    y = torch.randn(1, 8, 2, 2, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 32, 32, dtype=torch.float64)

    def f():
        bins, prob = dec(y)
        return (height_regression(bins, prob, 0.0, 1.0).values * w).sum()

    assert check_gradients(f, [y, dec.queries]) < 1e-4


def test_height_regression_gradient():
    torch.manual_seed(3)
    bins = torch.randn(2, 5, dtype=torch.float64, requires_grad=True)
    prob = torch.randn(2, 5, 3, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 3, 4, dtype=torch.float64)
    f = lambda: (height_regression(bins, prob, -17.355, 106.171).values * w).sum()  # noqa: E731
    assert check_gradients(f, [bins, prob]) < 1e-4


def test_wrappers_and_tensors_agree():
    bins, prob = torch.randn(1, 3), torch.randn(1, 3, 2, 2)
    a = height_regression(BinSet(bins), ProbabilityVolume(prob), 0, 5).values
    b = height_regression(bins, prob, 0, 5).values
    assert torch.equal(a, b)
