import copy
import pathlib
import sys

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from trisim.config import DEFAULT_CONFIG, validate  # noqa: E402
from trisim.data import encode_pairs, encoder_for, gen_synth_dataset  # noqa: E402

TINY = {
    "encoder": {"H": 2, "L": 6, "D": 8, "vocab": 12},
    "attention": {"d_prime": 4},
    "fusion": {"k": 2, "psi_sizes": [1, 3], "dilations": [1, 2], "d_dprime": 4},
    "head": {"hidden": 8},
    "train": {"epochs": 4, "batch_size": 16},
}


def tiny_config(**overrides) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for section, values in TINY.items():
        cfg[section].update(values)
    for dotted, value in overrides.items():
        section, key = dotted.split(".")
        cfg[section][key] = value
    return validate(cfg)


def tiny_data(cfg: dict, n_pairs: int = 120, seed: int = 0) -> dict:
    splits = gen_synth_dataset(n_pairs, cfg["encoder"]["vocab"], (3, 6), seed)
    enc = encoder_for(cfg)
    return {k: encode_pairs(v, enc, cfg["encoder"]["L"]) for k, v in splits.items()}


@pytest.fixture
def tiny_cfg():
    return tiny_config()


# ---------------------------------------------------------------------------
# acceptance report: one line per criterion-marked test

_CRITERIA: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _CRITERIA.append((marker.args[0], "PASS" if report.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _CRITERIA:
        terminalreporter.write_line(f"{status}  {name}" + (f"  ({detail})" if detail else ""))
