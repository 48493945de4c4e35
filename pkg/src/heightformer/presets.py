"""Reduced-width configurations shared by the experiment scripts and the acceptance suite."""
from .config import AugmentConfig, DataConfig, DecoderConfig, EncoderConfig, TrainConfig


def reduced_encoder(n_bins: int) -> EncoderConfig:
    return EncoderConfig(
        n_bins=n_bins, channel_multiplier=16, conv_widths=(16, 32, 64), conv_blocks=(1, 1, 1),
        embed_dim=24, depths=(2, 2, 2, 2), heads=(1, 2, 4, 8), coupling_reduction=16,
    )


def reduced_decoder(n_bins: int) -> DecoderConfig:
    return DecoderConfig(n_bins=n_bins, query_dim=32, query_heads=2, ffn_dim=64, conv_hidden=16)


def overfit_config(steps: int = 200, lr: float = 2e-3, batch_size: int = 4) -> TrainConfig:
    """Eight 256x256 tiles (two 512x512 scenes), N=8, no augmentation."""
    return TrainConfig(
        epochs=1000, batch_size=batch_size, lr=lr, max_steps=steps,
        encoder=reduced_encoder(8), decoder=reduced_decoder(8), augment=AugmentConfig.identity(256),
        data=DataConfig(tile=256, synth_size=512, synth_scenes=2, synth_val_scenes=0),
    )


def ablation_config(steps: int = 600, lr: float = 2e-3, batch_size: int = 4) -> TrainConfig:
    """Bimodal scenes (ground plus one shared roof level per scene) at 0.3 m, 128x128 tiles."""
    return TrainConfig(
        epochs=1000, batch_size=batch_size, lr=lr, max_steps=steps,
        encoder=reduced_encoder(8), decoder=reduced_decoder(8), augment=AugmentConfig.identity(128),
        data=DataConfig(
            tile=128, synth_size=256, synth_scenes=8, synth_val_scenes=4, synth_resolution=0.3,
            synth_shared_roof=True, synth_trees=False,
        ),
    )
