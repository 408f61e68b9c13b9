import numpy as np
import pytest
from hypothesis import settings

from effscale import core, lawfit
from effscale.trainer import RunRecord

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

FIXTURE_LAW = lawfit.LawParams(a=400.0, b=0.3, c=400.0, d=0.3, e=1.7)
FIXTURE_SIZES = (2e5, 5e5, 1.1e6, 2.4e6)


@pytest.fixture
def f64():
    with core.precision(64):
        yield


def make_records(law, spec="dense", eff=1.0, sizes=FIXTURE_SIZES, ratios=(20.0, 40.0),
                 noise=0.0, seed=0, eff_fn=None):
    """RunRecords whose losses come from ``law`` (optionally with lognormal noise).

    ``eff_fn(ratio)`` overrides ``eff`` to build ratio-dependent fixtures.
    """
    rng = np.random.default_rng(seed)
    out = []
    for ratio in ratios:
        for n in sizes:
            n_int = int(n)
            d = int(round(ratio * n_int))
            e = eff_fn(ratio) if eff_fn is not None else eff
            loss = lawfit.predict_loss(law, n_int, d, e)
            if noise:
                loss *= float(np.exp(rng.normal(0.0, noise)))
            out.append(RunRecord(
                digest=f"{spec}-{n_int}-{ratio:g}",
                model_config={}, n_params=n_int, tokens=d, spec=spec,
                tokens_per_param=d / n_int, val_loss=loss, diverged=False,
                loss_curve=[], hparams={}, seed=seed, wallclock=0.0,
            ))
    return out


# one line per acceptance criterion, collected by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
