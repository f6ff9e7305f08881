import sys
from pathlib import Path

import pytest

from dape.model import EncoderConfig
from dape.signalio import prepare_sources
from dape.synth import SynthClassSpec, SynthSourceSpec, generate_source, reference_sources

# lets test modules import the oracle helpers
sys.path.insert(0, str(Path(__file__).parent))

# small enough for sub-second epochs on 2 s windows at 128 Hz
TINY_MODEL = EncoderConfig(n_z=6, filters=(4, 4, 6, 8))


def small_sources(n=3):
    specs = [SynthSourceSpec("a", 3, 128.0, trials_per_class=4, trial_seconds=9.0,
                             label_mode="valence_arousal", mixing_seed=1),
             SynthSourceSpec("b", 4, 128.0, amplitude_scale=2.0, dc_offset=0.5,
                             trials_per_class=4, trial_seconds=9.0, mixing_seed=2),
             SynthSourceSpec("c", 2, 128.0, amplitude_scale=0.5, trials_per_class=4,
                             trial_seconds=9.0, label_mode="discrete4", mixing_seed=3)]
    return specs[:n]


@pytest.fixture(scope="session")
def small_store():
    """3 sources, 16 windows per class each (10/3/3 per class across splits)."""
    datasets = [generate_source(s, SynthClassSpec(), seed=0, source_index=i)
                for i, s in enumerate(small_sources())]
    return prepare_sources(datasets, seed=0)


@pytest.fixture(scope="session")
def reference_store():
    datasets = [generate_source(s, SynthClassSpec(), seed=0, source_index=i)
                for i, s in enumerate(reference_sources())]
    return prepare_sources(datasets, seed=0)


# ------------------------------------------------------------ acceptance lines

ACCEPTANCE = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    """Remember one pass/fail line; printed in the terminal summary."""
    ACCEPTANCE.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: _criterion_key(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


def _criterion_key(c):
    digits = "".join(ch for ch in c if ch.isdigit())
    return int(digits), c


# ------------------------------------------------- the seeded reference run

@pytest.fixture(scope="session")
def reference_experiment(tmp_path_factory):
    from dape.config import reference_config
    from dape.experiment import run_experiment
    out = tmp_path_factory.mktemp("reference")
    res = run_experiment(reference_config(), out)
    return {"dir": out, **res, "by_variant": {r.variant: r for r in res["reports"]}}


@pytest.fixture(scope="session")
def reference_repeat(tmp_path_factory):
    from dape.config import reference_config
    from dape.experiment import run_experiment
    out = tmp_path_factory.mktemp("reference_repeat")
    return {"dir": out, **run_experiment(reference_config(), out)}
