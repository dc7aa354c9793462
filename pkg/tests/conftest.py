import pytest
import torch

from cpfs3d.config import RunConfig
from cpfs3d.train import make_benchmark, set_determinism

set_determinism()

TINY = dict(n_train_scenes=12, n_test_scenes=3, k=1, d=32, proj_dim=16, sa1_widths=(16, 16, 32), nsample=8,
            W=16, batch_size=2, n_way=2, k_shot=1, support_points=64, pretrain_epochs=1, finetune_epochs=1,
            steps_per_epoch=2, lr=0.003, finetune_lr=0.003, bank_init="abs_gaussian")


@pytest.fixture(scope="session")
def tiny_cfg():
    return RunConfig().replace(**TINY)


@pytest.fixture(scope="session")
def tiny_bench(tiny_cfg):
    return make_benchmark(tiny_cfg)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# one (criterion, passed, detail) entry per acceptance criterion, printed after the run
ACCEPTANCE = []
ACCEPTANCE_TABLES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}")
    for table in ACCEPTANCE_TABLES:
        terminalreporter.write_line(table)
