import json

import pytest

from aggmesh.data import DatasetInfo, DeformSpec, save_dataset, synth_dataset
from aggmesh.gradcheck import micro_model
from aggmesh.graph import write_off
from aggmesh.sampling import save_hierarchy
from aggmesh.shapes import fibonacci_sphere

MICRO_NET = dict(
    input_size=16, levels=2, encoder_channels=[4, 4], embedding_dim=8, embedding_hidden=16,
    decoder_channels=4, growth=2, head_channels=4,
)


@pytest.fixture(scope="session")
def micro_workspace(tmp_path_factory):
    """Template, hierarchy, 8-sample dataset and run config for a 16 px model."""
    root = tmp_path_factory.mktemp("micro")
    template = fibonacci_sphere(80, 0.6)
    write_off(template, root / "template.off")
    save_hierarchy(micro_model().hierarchy, root / "hierarchy")
    spec = DeformSpec(4, 0.1)
    recs = synth_dataset(template, spec, 8, seed=3, image_size=16)
    save_dataset(root / "data", recs, DatasetInfo("template.off", spec.__dict__, 3, 8, 16))
    cfg = {"net": MICRO_NET, "train": dict(seed=5, batch_size=4, steps=12, log_every=2, ckpt_every=6)}
    (root / "config.json").write_text(json.dumps(cfg))
    return root


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion and print it."""

    def record(criterion, passed, detail, status=None):
        status = status or ("PASS" if passed else "FAIL")
        line = f"[{status}] criterion {criterion}: {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        return passed

    return record
