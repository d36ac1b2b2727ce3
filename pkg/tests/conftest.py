import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def central_diff(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` at flat float64 ``x``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# shared corpus, base model and probe (built once per session)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    from phycustom.dataset import generate_corpus, write_manifest
    root = tmp_path_factory.mktemp("corpus")
    write_manifest(root, generate_corpus())
    return root


@pytest.fixture(scope="session")
def manifest(corpus_dir):
    from phycustom.dataset import read_manifest
    return read_manifest(corpus_dir)


@pytest.fixture(scope="session")
def probe(corpus_dir, manifest):
    from phycustom.dataset import manifest_hash
    from phycustom.evalbench import train_probe
    return train_probe(manifest, manifest_hash(corpus_dir))


@pytest.fixture(scope="session")
def base(manifest):
    from phycustom.dataset import grid_arrays
    from phycustom.trainer import PretrainConfig, pretrain_base
    images, items = grid_arrays(manifest)
    return pretrain_base(images, [it.prompt for it in items], PretrainConfig())


# acceptance verdicts, printed as one line each at the end of the run
VERDICTS: dict[str, tuple[bool, str]] = {}
CRITERIA = ("A1", "A2", "A3", "A4", "A5", "A6", "A7", "A8", "A9")


@pytest.fixture
def verdict():
    def record(key: str, ok: bool, detail: str) -> bool:
        VERDICTS[key] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    reports = [r for k in ("passed", "failed", "error") for r in terminalreporter.stats.get(k, [])]
    ran = [k for k in CRITERIA
           if any(f"test_acceptance.py::test_{k}_" in getattr(r, "nodeid", "") for r in reports)]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for key in ran:
        ok, detail = VERDICTS.get(key, (False, "did not complete"))
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {detail}")
