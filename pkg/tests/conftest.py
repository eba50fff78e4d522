import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from importlib import resources  # noqa: E402

import pytest  # noqa: E402
from hypothesis import settings  # noqa: E402

from fastsearch.data import TaskConfig, make_task  # noqa: E402
from fastsearch.genotype import Genotype  # noqa: E402
from fastsearch.latency import CostModel, build_lut  # noqa: E402
from fastsearch.search import SearchHyperparams  # noqa: E402
from fastsearch.space import SearchSpaceConfig, build_search_space  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

TINY_TASK = TaskConfig(height=32, width=64, n_train=8, n_val=4, seed=3)
TINY_HP = SearchHyperparams(pretrain_epochs=1, search_epochs=1, batch_size=4, w_lr=0.05,
                            arch_lr=0.01, lam=0.1, keep_fraction=0.5, scratch_epochs=1)


@pytest.fixture(scope="session")
def space():
    return build_search_space(SearchSpaceConfig())


@pytest.fixture(scope="session")
def lut(space):
    return build_lut(space, CostModel())


@pytest.fixture(scope="session")
def small_space():
    return build_search_space(SearchSpaceConfig(layers=4))


@pytest.fixture(scope="session")
def small_lut(small_space):
    return build_lut(small_space, CostModel())


@pytest.fixture(scope="session")
def tiny_space():
    return build_search_space(SearchSpaceConfig(layers=3))


@pytest.fixture(scope="session")
def tiny_lut(tiny_space):
    return build_lut(tiny_space, CostModel())


@pytest.fixture(scope="session")
def tiny_data():
    return make_task(TINY_TASK)


@pytest.fixture
def tiny_hp():
    return TINY_HP


@pytest.fixture(scope="session")
def fasterseg():
    text = resources.files("fastsearch").joinpath("data/fasterseg_genotype.json").read_text()
    return Genotype.from_json(text)


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
