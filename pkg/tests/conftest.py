import pytest
import torch

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def fixture32():
    """Shared 32x32 synthetic dataset (40 samples)."""
    from distillseg import imaging

    return imaging.synth_fixture(seed=11, n=40, size=32)


@pytest.fixture(scope="session")
def split32(fixture32):
    from distillseg import imaging

    split = imaging.split_dataset(fixture32, (0.8, 0.1, 0.1), seed=11)
    return imaging.SplitData(samples={s.id: s for s in fixture32}, split=split)
