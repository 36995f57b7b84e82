import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

from msoreid.data import SyntheticDatasetConfig, generate_synthetic  # noqa: E402


def _png(path, rng, size=(24, 12)):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rng.integers(0, 256, size=(*size, 3), dtype=np.uint8)).save(path)


@pytest.fixture
def sysu_root(tmp_path):
    """SYSU-MM01 lookalike: 4 identities x 6 cameras x 2 images."""
    rng = np.random.default_rng(0)
    root = tmp_path / "SYSU-MM01"
    for cam in range(1, 7):
        for pid in (1, 2, 3, 4):
            for j in range(2):
                _png(root / f"cam{cam}" / f"{pid:04d}" / f"{j + 1:04d}.jpg", rng)
    (root / "exp").mkdir()
    (root / "exp" / "train_id.txt").write_text("1\n")
    (root / "exp" / "val_id.txt").write_text("3\n")
    (root / "exp" / "test_id.txt").write_text("2,4\n")
    return root


@pytest.fixture
def regdb_root(tmp_path):
    """RegDB lookalike for trial 1: 4 identities x (10 visible + 10 thermal)."""
    rng = np.random.default_rng(1)
    root = tmp_path / "RegDB"
    (root / "idx").mkdir(parents=True)
    parts = {"train": (7, 12), "test": (20, 31)}
    for part, pids in parts.items():
        for name, folder in (("visible", "Visible"), ("thermal", "Thermal")):
            lines = []
            for pid in pids:
                for j in range(10):
                    rel = f"{folder}/{pid}/{name}_{j}.bmp"
                    _png(root / rel, rng)
                    lines.append(f"{rel} {pid}")
            (root / "idx" / f"{part}_{name}_1.txt").write_text("\n".join(lines) + "\n")
    return root


@pytest.fixture(scope="session")
def small_synthetic():
    cfg = SyntheticDatasetConfig(num_identities=8, images_per_id_per_modality=4, num_test_identities=4, seed=3)
    return generate_synthetic(cfg)


# ------------------------------------------------------------ acceptance report

ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[2:])):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key:<5} {status:<4} {detail}")
