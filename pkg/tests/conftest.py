import pytest
import torch
from torch import nn

from btd.model import ModelConfig

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


class ConstantModel(nn.Module):
    """Noise predictor stub returning a constant field."""

    def __init__(self, value: float = 0.0, patch_size: int = 16):
        super().__init__()
        self.value = value
        self.config = ModelConfig(2, 1, 1, 4, patch_size)
        self.training_steps = 0

    def forward(self, x, t):
        return torch.full_like(x, self.value)


class OracleModel(nn.Module):
    """Returns a fixed noise tensor regardless of input (the 'perfect' predictor)."""

    def __init__(self, eps: torch.Tensor):
        super().__init__()
        self.eps = eps
        self.config = ModelConfig(2, 1, 1, 4, eps.shape[-1])

    def forward(self, x, t):
        return self.eps.to(x.dtype).expand_as(x)


@pytest.fixture
def constant_model():
    return ConstantModel


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
