import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fofelm.models import ArchitectureConfig  # noqa: E402


@pytest.fixture
def tiny_cfg():
    def make(variant="MIXTURE", **kw):
        base = dict(variant=variant, d=6, N=3, L=2, k=3, vocab_size=13, alpha=0.6)
        base.update(kw)
        return ArchitectureConfig(**base)
    return make
