import pytest
import torch

from saccader.backbone import BackboneConfig
from saccader.data import GlyphDatasetConfig, generate_glyph_dataset
from saccader.model import ModelConfig
from saccader.mpsa import MpsaConfig

torch.set_num_threads(1)


def tiny_model_config(classes: int = 4) -> ModelConfig:
    # 64px canvas, 32px views: peripheral factor 2, 8x8 then 4x4 tokens
    return ModelConfig(BackboneConfig(channels=(8, 16), input_side=32, patch=4), MpsaConfig(parts=4), classes, 64)


def tiny_data_config(**kw) -> GlyphDatasetConfig:
    base = dict(canvas=64, glyph=16, num_classes=4, fine_variants=2, train_per_class=6, test_per_class=3,
                clutter_density=0.0)
    base.update(kw)
    return GlyphDatasetConfig(**base)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_glyph_dataset(tiny_data_config())


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


# -- acceptance report ----------------------------------------------------------------
# tests marked ``criterion(k)`` attach a ``detail`` property; the summary prints one line each

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(k): acceptance criterion number k")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if rep.passed else "FAIL"
    if rep.skipped:
        status = "SKIP"
    _CRITERIA[mark.args[0]] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(_CRITERIA):
        status, detail = _CRITERIA[k]
        terminalreporter.write_line(f"criterion {k}: {status}  {detail}".rstrip())
