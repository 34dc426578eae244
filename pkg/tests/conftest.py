import io
from pathlib import Path

import pytest
from PIL import Image

from foodtaxo.imageio import preprocess
from foodtaxo.ontology import load_taxonomy_file

FIXTURES = Path(__file__).parent / "fixtures"


def make_image_bytes(width=320, height=240, color=(180, 90, 40), fmt="JPEG") -> bytes:
    img = Image.new("RGB", (width, height), color)
    # a little structure so JPEG encoding is not trivial
    for x in range(0, width, 16):
        for y in range(height):
            img.putpixel((x, y), (20, 20, 20))
    buf = io.BytesIO()
    img.save(buf, format=fmt)
    return buf.getvalue()


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def taxonomy():
    return load_taxonomy_file(FIXTURES / "taxonomy.yaml")


@pytest.fixture(scope="session")
def restricted_taxonomy():
    return load_taxonomy_file(FIXTURES / "taxonomy_restricted.yaml")


@pytest.fixture(scope="session")
def image():
    return preprocess(make_image_bytes())


@pytest.fixture()
def burger_jpeg(tmp_path):
    path = tmp_path / "burger.jpg"
    path.write_bytes(make_image_bytes())
    return path


# criterion lines recorded by test_acceptance.py, repeated at the end of the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
