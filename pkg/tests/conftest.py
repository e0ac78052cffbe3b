import textwrap

import pytest

from f2gan.config import loads_config

SMALL_RUN = """
name: small
seed: 3
iterations: 20
batch_size: 16
strategy: f2a
model:
  noise_dim: 2
  generator_hidden: [8]
  discriminator_hidden: [8]
metrics:
  cadence: 5
  eval_samples: 200
scenario:
  layout: {kind: line, count: 3, spacing: 4.0, std: 0.5}
  num_clients: 3
"""


def small_config(**overrides):
    cfg = loads_config(textwrap.dedent(SMALL_RUN))
    return cfg.replace(**overrides) if overrides else cfg


@pytest.fixture
def small_cfg():
    return small_config()


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
