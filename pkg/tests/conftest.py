import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fdcae_lab.config import load_config  # noqa: E402

SMALL = {
    "corpus": {"adult_train_speakers": 8, "adult_train_utts": 4, "adult_test_speakers": 2, "adult_test_utts": 3,
               "child_train_speakers": 2, "child_train_utts": 3, "child_test_speakers": 2, "child_test_utts": 3,
               "accent_train_speakers": 2, "accent_train_utts": 3, "accent_test_speakers": 2,
               "accent_test_utts": 3},
    "features": {"ubm_components": 8, "gmm_iters": 6, "gmm_components": 2},
    "model": {"hidden_dim": 16, "pcode_dim": 16, "decoder_dim": 16},
    "train": {"epochs": 1, "beta_effective": 0.01},
    "matrix": {"seeds": "0", "conditions": "baseline:i fdcae:i", "adapt_conditions": "fdcae:i"},
}


def small_config(**sections):
    overrides = {k: dict(v) for k, v in SMALL.items()}
    for k, v in sections.items():
        overrides.setdefault(k, {}).update(v)
    return load_config(overrides=overrides)


@pytest.fixture(scope="session")
def small_ws(tmp_path_factory):
    """A fully prepared work directory on a small corpus (shared, treat as read-only)."""
    from fdcae_lab.eval.pipeline import Workspace, prepare_all

    return prepare_all(Workspace(tmp_path_factory.mktemp("small_ws"), small_config()))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
