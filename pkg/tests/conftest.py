from __future__ import annotations

from datetime import date

import pytest
from hypothesis import HealthCheck, settings

from riskwatch.datagen import GeneratorSpec, generate
from riskwatch.taxonomy import RiskType

settings.register_profile("riskwatch", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("riskwatch")

NO_EVENTS = {r: 0.0 for r in RiskType}


def small_spec(**changes) -> GeneratorSpec:
    base = dict(seed=7, n_instruments=3, n_forex=1, n_commodities=1,
                start_date=date(2021, 1, 1), end_date=date(2021, 12, 31))
    base.update(changes)
    return GeneratorSpec(**base)


@pytest.fixture(scope="session")
def small_records():
    return generate(small_spec())


@pytest.fixture(scope="session")
def small_prepared(small_records):
    from riskwatch.preprocess import prepare
    return prepare(small_records, lookback=10, horizon=10)


@pytest.fixture(scope="session")
def small_samples(small_prepared):
    return small_prepared.samples


BUNDLE_CUTOFF = date(2021, 11, 30)


def train_small_bundle(directory, records):
    """Cheap three-model bundle trained on records up to BUNDLE_CUTOFF."""
    from riskwatch.lstm import TrainConfig
    from riskwatch.preprocess import prepare
    from riskwatch.scoring import train_bundle
    from riskwatch.trees import TreeParams

    history = records.slice_dates(date(1900, 1, 1), BUNDLE_CUTOFF)
    prepared = prepare(history, lookback=10, horizon=10)
    return train_bundle(directory, history, prepared,
                        TrainConfig(hidden_size=8, max_epochs=5, patience=2),
                        TreeParams(20, 10, 5, seed=1),
                        TreeParams(20, 6, 10, learning_rate=0.1, seed=2))


@pytest.fixture(scope="session")
def two_year_records():
    return generate(small_spec(start_date=date(2020, 1, 1), end_date=date(2021, 12, 31)))


@pytest.fixture(scope="session")
def small_bundle(tmp_path_factory, two_year_records):
    return train_small_bundle(tmp_path_factory.mktemp("bundle"), two_year_records)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {title}: {detail}")
