"""Shared fixtures: a small synthetic corpus and its feature cache.

The heavyweight trained-model fixtures live in test_acceptance.py; everything
here is sized for unit tests (a 4-speaker, 16-utterance corpus).
"""

import pytest

from serobust.corpus import synth_corpus, synth_noise_bank
from serobust.features import FeatureCache

#: verdict lines collected by the acceptance tests, echoed after the run
ACCEPT_LINES = []


def record_verdict(line: str) -> None:
    ACCEPT_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPT_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPT_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_corpus")
    return synth_corpus(4, 4, 3, root)


@pytest.fixture(scope="session")
def small_cache(small_corpus, tmp_path_factory):
    cache = FeatureCache(tmp_path_factory.mktemp("small_cache"))
    cache.build(small_corpus)
    return cache


@pytest.fixture(scope="session")
def noise_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("noise_bank")
    synth_noise_bank(5, root, duration=2.0)
    return root
