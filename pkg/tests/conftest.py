from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from objstreams.pipeline import PipelineConfig, SessionReport, load_session, run_pipeline
from objstreams.policy import PolicyStore
from objstreams.scene import SceneObject, SceneSpec, generate_scene, street_scene


@dataclass
class Built:
    root: Path
    store: PolicyStore
    frames: np.ndarray
    report: SessionReport
    cfg: PipelineConfig

    @property
    def public(self) -> Path:
        return self.root / "public"

    @property
    def session(self):
        return load_session(self.root)


def build_session(root: Path, spec: SceneSpec, seed: int = 5, **overrides) -> Built:
    """Run the pipeline on ``spec`` with a local, deterministic policy store."""
    from objstreams.pipeline import _rng_bytes

    cfg = PipelineConfig(output=str(root), scene=spec, deterministic_seed=seed, segment_length=8, epoch_period=2)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    store = PolicyStore(spec.classes, admin_token="admin", random_bytes=_rng_bytes(seed + 1))
    report = run_pipeline(cfg, key_source=store)
    frames, _ = generate_scene(spec)
    return Built(root, store, frames, report, cfg)


def two_class_scene(n_frames: int = 24) -> SceneSpec:
    """A car and a person that overlap mid-scene, plus a static truck."""
    return SceneSpec(
        64,
        48,
        n_frames,
        ["car", "person", "truck"],
        [
            SceneObject("car", 0, 10, 20, 14, 1.5, 0, color=(200, 30, 30), track_id=0),
            SceneObject("person", 40, 8, 6, 16, -0.8, 0, color=(30, 200, 30), track_id=1),
            SceneObject("truck", 30, 30, 24, 14, 0, 0, spawn=4, despawn=20, color=(30, 30, 200), track_id=2),
        ],
        seed=2,
    )


@pytest.fixture
def small_scene() -> SceneSpec:
    return two_class_scene()


@pytest.fixture
def street() -> SceneSpec:
    return street_scene(seed=1, n_frames=48)


@pytest.fixture
def built(tmp_path, small_scene) -> Built:
    return build_session(tmp_path / "session", small_scene)


# Acceptance criteria print one line each; the lines are repeated at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
