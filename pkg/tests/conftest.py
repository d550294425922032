from pathlib import Path

import pytest

from omnidist.camera_model import CameraModel, default_camera

FIXTURES = Path(__file__).parent / "fixtures"

# three-knot table used by several hand-computed examples
SMALL_TABLE = ((0.0, 0.0), (1.0, 0.5), (2.0, 1.2))


@pytest.fixture
def small_model():
    return CameraModel(SMALL_TABLE, 0.003, (500.0, 400.0), 2.5)


@pytest.fixture
def cam256():
    return default_camera(256)


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """24 synthetic 128 px scenes, shared by the toy-model and CLI tests."""
    from omnidist.data_io import SceneConfig, generate_dataset, load_dataset

    root = tmp_path_factory.mktemp("tiny")
    model = default_camera(128)
    generate_dataset(5, model, SceneConfig(image_side_px=128, distance_m=(1.5, 4.0), min_gap_px=2.0), 24, root)
    return load_dataset(root)


@pytest.fixture(scope="session")
def gate_run(tmp_path_factory):
    """512 default synthetic scenes and a head trained on them with the default config.

    Shared by the toy-model smoke tests and the learning-gate acceptance check.
    """
    from omnidist.data_io import SceneConfig, generate_dataset, load_dataset
    from omnidist.toy_model import HeadConfig, load_images, train

    root = tmp_path_factory.mktemp("gate")
    generate_dataset(0, default_camera(256), SceneConfig(), 512, root)
    dataset = load_dataset(root)
    images = load_images(dataset)
    cfg = HeadConfig()
    return dataset, images, cfg, train(dataset, cfg, images=images)


# --- acceptance summary: one PASS/FAIL line per criterion --------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    mark = getattr(report, "criterion", None)
    if mark is None:
        return
    n, title = mark
    if report.when == "call" or report.outcome == "failed":
        _CRITERIA[n] = (title, "PASS" if report.passed else "FAIL")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = tuple(m.args)
    return rep


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcome = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {outcome}  {title}")
