import numpy as np
import pytest
import torch

from heightformer.config import AugmentConfig, DataConfig, DecoderConfig, EncoderConfig, TrainConfig

ACCEPTANCE_LINES: list[str] = []


def central_diff_grad(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``f`` at ``x`` by central differences (x is perturbed in place)."""
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = numeric.abs().max().item()
    assert scale > 0, "degenerate gradient"
    return (analytic - numeric).abs().max().item() / scale


def check_gradients(f, tensors, h: float = 1e-6) -> float:
    """Worst relative error between autograd and central differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    f().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().clone()
        numeric = central_diff_grad(f, t.data, h)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def tiny_encoder(n_bins=8, **kw):
    base = dict(
        n_bins=n_bins,
        channel_multiplier=16,
        conv_widths=(16, 32, 64),
        conv_blocks=(1, 1, 1),
        embed_dim=24,
        depths=(2, 2, 2, 2),
        heads=(1, 2, 4, 8),
        coupling_reduction=16,
    )
    base.update(kw)
    return EncoderConfig(**base)


def tiny_decoder(n_bins=8, **kw):
    base = dict(n_bins=n_bins, query_dim=32, query_heads=2, ffn_dim=64, conv_hidden=16)
    base.update(kw)
    return DecoderConfig(**base)


def tiny_train_config(n_bins=8, tile=64, **kw) -> TrainConfig:
    base = dict(
        epochs=1000,
        batch_size=2,
        lr=2e-3,
        max_steps=6,
        encoder=tiny_encoder(n_bins),
        decoder=tiny_decoder(n_bins),
        augment=AugmentConfig.identity(tile),
        data=DataConfig(tile=tile, synth_size=2 * tile, synth_scenes=1, synth_val_scenes=0),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
