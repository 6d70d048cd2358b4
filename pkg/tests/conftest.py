import numpy as np
import pytest

from lexalign.synth import SynthConfig, build_dataset, write_dataset
from lexalign.trainer import TrainConfig, train

SMALL = SynthConfig(vocab_size=32, d_img=16, d_txt=16, grid=3, n_train=96, n_val=8, n_test=24,
                    max_active=3, n_scenes=3, scene_classes=3, scene_grid=4)
SMALL_TRAIN = TrainConfig(epochs=2, batch_size=16, hidden=16, warmup_iters=4, penalty_warmup=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    return build_dataset(SMALL)


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory, small_dataset):
    out = tmp_path_factory.mktemp("data")
    write_dataset(small_dataset, out)
    return out


@pytest.fixture(scope="session")
def small_run(small_dataset):
    return train(SMALL_TRAIN, small_dataset)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_COUNT = 10


def record(criterion: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        if n not in ACCEPTANCE:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
            continue
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
