import torch

from src.experiment_planning.experiment_config import ModelConfig

TOY_CHANNELS = (4, 8, 8)


def toy_model_config(**overrides) -> ModelConfig:
    values = dict(channels=TOY_CHANNELS, latent_channels=4, num_heads=2, offset_groups=2, intra_quality=1)
    values.update(overrides)
    return ModelConfig(**values)


def perturb_zero_init(module: torch.nn.Module, std: float = 0.05, seed: int = 0):
    """Give zero-initialized layers small random weights so every path carries gradient."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, torch.nn.Conv2d) and getattr(m, 'zero_init', False):
                m.weight.add_(std * torch.randn(m.weight.shape, generator=generator, dtype=m.weight.dtype))
                m.bias.add_(std * torch.randn(m.bias.shape, generator=generator, dtype=m.bias.dtype))
