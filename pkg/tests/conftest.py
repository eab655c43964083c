import os
from pathlib import Path

import hypothesis
import numpy as np
import pytest

from mapd_lab import mapper as mp
from mapd_lab.backbone import BackboneConfig, FrozenBackbone, random_weights

hypothesis.settings.register_profile("default", max_examples=30, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def tiny_backbone_config(**kw) -> BackboneConfig:
    base = dict(num_layers=1, num_heads=2, d_model=8, d_ff=16, vocab_size=72, max_seq_len=64, seed=3,
                warmup_steps=0)
    base.update(kw)
    return BackboneConfig(**base)


def tiny_backbone(dtype=np.float32, **kw) -> FrozenBackbone:
    cfg = tiny_backbone_config(**kw)
    w = {k: v.astype(dtype) for k, v in random_weights(cfg).items()}
    return FrozenBackbone(cfg, w)


@pytest.fixture
def tiny_model():
    return tiny_backbone()


@pytest.fixture
def tiny_mapper():
    return mp.init_mapper(m=3, d_in=32, d_model=8, num_heads=2, seed=5)


@pytest.fixture(scope="session")
def lab():
    """Default configuration with the cached warm-up backbone and stage-1 mapper."""
    from mapd_lab import config as C
    from mapd_lab import experiments as X
    cfg = C.resolve({})
    bb = X.get_backbone(cfg, log_every=500)
    return {"cfg": cfg, "backbone": bb, "stage1": X.get_stage1(cfg, bb)}


TINY_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "tiny.json"
PIPELINE = [["pretrain"], ["train"], ["eval"]] + [["analyze", "--kind", k] for k in
                                               ("entropy", "flops", "perturb", "selection", "prompt-sweep", "convergence")]


def run_tiny_pipeline(root: Path) -> Path:
    """Every CLI stage on the tiny config with a private cache; returns the run directory."""
    from mapd_lab import cli
    out = root / "run"
    old = os.environ.get("MAPD_LAB_CACHE")
    os.environ["MAPD_LAB_CACHE"] = str(root / "cache")
    try:
        for stage in PIPELINE:
            code = cli.main(stage + ["--config", str(TINY_CONFIG), "--out", str(out)])
            assert code == 0, f"{stage} exited with {code}"
    finally:
        if old is None:
            del os.environ["MAPD_LAB_CACHE"]
        else:
            os.environ["MAPD_LAB_CACHE"] = old
    return out


@pytest.fixture(scope="session")
def tiny_runs(tmp_path_factory):
    """Two independent runs of the tiny pipeline (separate caches and output directories)."""
    return [run_tiny_pipeline(tmp_path_factory.mktemp(f"tiny{i}")) for i in range(2)]


ACCEPTANCE_LINES: list = []


def record_criterion(number: int, passed: bool, detail: str):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
