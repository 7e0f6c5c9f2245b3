import sys
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)

STUB = Path(__file__).parent / "stub_evaluator.py"


def stub_command(*flags: str) -> str:
    return " ".join([sys.executable, str(STUB), *flags])


@pytest.fixture
def space():
    from segsearch.genotype import SpaceConfig

    return SpaceConfig()


@pytest.fixture
def tiny_space():
    from segsearch.genotype import SpaceConfig

    return SpaceConfig(num_blocks=1, num_templates=1)
