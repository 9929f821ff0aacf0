import numpy as np
import pytest

from eedet.data import SceneSpec, generate_dataset
from eedet.model import BackboneConfig, EEBranchConfig, HeadConfig, build_model

TINY_SCENE = SceneSpec(height=32, width=32, object_size=(8, 12), objects_per_image=(1, 2))


def tiny_backbone(alpha=0.25):
    return BackboneConfig(input_shape=(32, 32, 1), width_multiplier=alpha)


def tiny_model(attach=7, seed=0, alpha=0.25):
    ee = EEBranchConfig(attach_layer=attach, mid_channels=16, fc_hidden=16) if attach else None
    return build_model(tiny_backbone(alpha), ee, HeadConfig(), seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_data():
    return {"train": generate_dataset(TINY_SCENE, 20, 11), "val": generate_dataset(TINY_SCENE, 10, 12),
            "test": generate_dataset(TINY_SCENE, 12, 13)}


# one PASS/FAIL line per acceptance criterion, printed in the terminal summary
_VERDICTS = {}


@pytest.fixture(scope="session")
def verdict():
    def record(ac, ok, detail=""):
        _VERDICTS.setdefault(ac, []).append((bool(ok), detail))
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for ac in sorted(_VERDICTS, key=lambda k: (int(k[2:].rstrip("abc")), k)):
        parts = _VERDICTS[ac]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts if d)
        terminalreporter.write_line(f"{ac} {'PASS' if ok else 'FAIL'} {detail}")
