import numpy as np
import pytest

from ctmetaaf import scenes as sc


def toy_scenes(seed=0, counts=None, classes=(0, 1), len_s=0.6, ser=(-10.0, 0.0), rir_taps=64):
    counts = counts or {"train": 16, "val": 8, "test": 8}
    rows = sc.build_toy_manifest(seed, counts, list(classes), len_s=len_s, ser_range=ser)
    settings = sc.SceneSettings(seed=seed, rir_taps=rir_taps)
    return {f: [sc.render_scene(r, settings) for r in rows if r.fold == f] for f in sc.FOLDS}


@pytest.fixture(scope="session")
def small_folds():
    return toy_scenes()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record_verdict(number, title, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
