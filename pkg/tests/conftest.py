import pytest

from services.instrument import builtin
from services.rng import stream


@pytest.fixture
def ad():
    return builtin("AD", p=0.36)


@pytest.fixture
def ndm():
    return builtin("NDM", q=0.3)


@pytest.fixture
def pndm():
    return builtin("PNDM", q=0.3)


@pytest.fixture
def dr():
    return builtin("DR", q=0.3, phi=1.0)


@pytest.fixture
def uni():
    return builtin("UNI")


@pytest.fixture
def proj():
    return builtin("PROJ", k=2)


@pytest.fixture
def all_builtins(ad, ndm, pndm, dr, uni, proj):
    return [ad, ndm, pndm, dr, uni, proj]


@pytest.fixture
def rng():
    return stream(20240601, 99)


@pytest.fixture
def out_dirs(tmp_path, monkeypatch):
    """Keep logs and default run directories inside tmp_path."""
    from app.config import settings

    monkeypatch.setattr(settings, "log_dir", str(tmp_path / "logs"))
    monkeypatch.setattr(settings, "output_dir", str(tmp_path / "runs"))
    return tmp_path
