"""
Desk-scale acceptance runs: the shipped desk config, three seeds, every ablation row.

Deselected by default; run with ``pytest -m slow``.
"""
import numpy as np
import pytest

from backend.data.loader import ManifestLoader
from config.settings import CONFIG_DIR, load_run_config
from data_gen.dataset import generate_dataset
from detector.experiments import ablation_run, directional_check, format_directional

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2]


@pytest.fixture(scope="module")
def desk_ablation(tmp_path_factory):
    settings = load_run_config(CONFIG_DIR / "desk_config.json")
    manifest = generate_dataset(settings.dataset, tmp_path_factory.mktemp("desk") / "data")
    records = ManifestLoader(manifest).read_records()
    return ablation_run(records, manifest, settings.train, settings.eval, seeds=SEEDS)


class TestDeskAblation:
    """Component ordering and tier difficulty averaged over seeds"""

    def test_every_row_completes(self, desk_ablation):
        assert len(desk_ablation) == 8
        for report in desk_ablation:
            assert report.error is None
            assert sorted({fold.seed for fold in report.folds}) == SEEDS

    def test_directional_ordering(self, desk_ablation):
        checks = directional_check(desk_ablation)
        assert len(checks) == 7
        assert all(check.passed for check in checks), format_directional(checks)

    def test_dark_distractors_no_easier_than_bright_flat(self, desk_ablation):
        baseline = desk_ablation[0]
        assert baseline.name == "Baseline"
        dark = np.mean([f.tier_ap["dark_distractors"] for f in baseline.folds if "dark_distractors" in f.tier_ap])
        bright = np.mean([f.tier_ap["bright_flat"] for f in baseline.folds if "bright_flat" in f.tier_ap])
        assert dark <= bright
