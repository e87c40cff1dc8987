import torch

from retinavit.encoder import EncoderConfig, RetinaViT
from retinavit.pyramid import PyramidSpec

torch.set_num_threads(1)


def randomize(model: torch.nn.Module, seed: int, scale: float = 0.5):
    """Overwrite every parameter with seeded Gaussian noise (head included)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            noise = torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype)
            if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "encoder.norm.weight":
                p.copy_(1.0 + 0.1 * noise)
            else:
                p.copy_(scale * noise)
    return model


def tiny_model(seed: int = 0, pooling: str = "gap", dtype=torch.float64, depth: int = 2) -> RetinaViT:
    """dim 8, depth 2, 5 tokens (levels 8 and 4 with 4-pixel patches)."""
    spec = PyramidSpec.full(8, 4)
    cfg = EncoderConfig(dim=8, depth=depth, heads=2, mlp_dim=16, patch_edge=4, channels=3,
                        num_classes=3, pooling=pooling)
    torch.manual_seed(seed)
    model = RetinaViT(cfg, spec).to(dtype)
    return randomize(model, seed)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
