import pytest
import torch
from hypothesis import settings

from mirror_unet.config import ModelConfig

torch.set_num_threads(1)
settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")

TINY_WIDTHS = (2, 4, 4, 8, 8)

_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def tiny_config():
    def make(version="v3", shared=(5,), patch=16, **kw):
        return ModelConfig(version=version, shared=shared, stage_widths=TINY_WIDTHS,
                           in_patch=(patch, patch, patch), **kw)
    return make


@pytest.fixture
def criterion():
    """Record one acceptance criterion line; printed in the terminal summary."""
    def record(label: str, passed: bool, detail: str = ""):
        _CRITERIA.append((label, bool(passed), detail))
        assert passed, f"{label} failed: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}")
