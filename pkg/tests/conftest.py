import pytest
import torch

from tagret.backbone import ModelConfig
from tagret.data import GeneratorConfig, build_dataset

torch.set_num_threads(1)

# 20 train / 10 test identities; enough for a few batches of 32
MINI = dict(n_train_ids=20, n_test_ids=10, test_id_start=20)


def tiny_model(**kw) -> ModelConfig:
    args = dict(width=32, embed_dim=32, heads=2, image_depth=2, text_depth=1, mlp_hidden=64, expert_hidden=32, moe_blocks=(1,))
    args.update(kw)
    return ModelConfig(**args)


@pytest.fixture(scope="session")
def mini_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    train, test = build_dataset(GeneratorConfig(**MINI), root)
    return root, train, test


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    """The default 100/50-identity mixed-view dataset."""
    root = tmp_path_factory.mktemp("toy")
    train, test = build_dataset(GeneratorConfig(), root)
    return root, train, test


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record():
    """Store one acceptance result line; printed in the terminal summary."""

    def _record(criterion: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[criterion] = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
