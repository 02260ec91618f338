import os

import numpy as np
import pytest

from ifrx.linkgen import LinkConfig, generate_dataset
from ifrx.receiver import ToyRx, ToyRxConfig


@pytest.fixture(scope="session")
def small_link():
    return LinkConfig(n_subcarriers=12, n_symbols=5, pilot_symbols=(2,))


@pytest.fixture(scope="session")
def small_model(small_link):
    return ToyRx(ToyRxConfig(hidden_channels=4, n_layers=2, mf_taps=1), small_link)


@pytest.fixture(scope="session")
def small_data(small_link):
    return generate_dataset(small_link, seed=3, n=6)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def pytest_report_header(config):
    from ifrx._accel import backend_name

    return f"ifrx kernel backend: {backend_name()}; IFRX_THREADS={os.environ.get('IFRX_THREADS', 'unset')}"


TINY_INI = """
[experiment]
seeds = 0, 1
[link]
n_subcarriers = 12
n_symbols = 5
pilot_symbols = 2
[data]
n_train = 120
n_eval = 80
[model]
hidden_channels = 4
n_layers = 2
mf_taps = 1
[train]
epochs = 2
batch_size = 16
[arnoldi]
m = 12
k = 6
n_probes = 8
[influence]
top_n = 2
[finetune]
pool_size = 10
instances_per_step = 4
non_target_size = 20
multi_steps = 4
[sweep]
rates = 0, 1e-3
max_steps = 3
"""


@pytest.fixture(scope="session")
def tiny_config():
    from ifrx.pipeline import ExperimentConfig

    return ExperimentConfig.from_ini(TINY_INI)


@pytest.fixture(scope="session")
def tiny_run(tiny_config, tmp_path_factory):
    from ifrx import pipeline

    run_dir = tmp_path_factory.mktemp("tiny") / "run"
    pipeline.run(tiny_config, run_dir)
    pipeline.emit_reports(run_dir)
    return run_dir


# ------------------------------------------------------------------- acceptance support

CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture()
def criterion():
    """Record a numbered acceptance result, then assert it."""

    def record(number: int, ok: bool, detail: str):
        CRITERIA[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def acceptance_run(tmp_path_factory):
    """Trained desk-scale run shared by the statistical criteria.

    ``IFRX_TEST_CACHE`` names a persistent directory; completed stages there are
    reused on the next session.
    """
    from pathlib import Path

    from ifrx import pipeline

    cfg = pipeline.ExperimentConfig.load(Path(__file__).with_name("acceptance.ini"))
    cache = os.environ.get("IFRX_TEST_CACHE")
    run_dir = Path(cache) / "acceptance" if cache else tmp_path_factory.mktemp("acceptance") / "run"
    pipe = pipeline.Pipeline(cfg, run_dir)
    (pipe.dir / "config.ini").write_text(cfg.to_ini())
    pipe.run()
    pipeline.emit_reports(run_dir)
    return pipe
