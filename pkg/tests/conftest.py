"""Shared fixtures: a tiny synthetic corpus and its feature caches."""

from __future__ import annotations

import time

import numpy as np
import pytest

from polyfeat.cache import Record, write_records
from polyfeat.dataset import SynthRecipe, chunk_clip, decode_and_resample, generate_synthetic_corpus
from polyfeat.features import StandInProjector, compute_view

TINY_CLASSES = 4


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """4 classes x 5 clips of 1.5 s (two chunks each)."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    return generate_synthetic_corpus(root, seed=3, n_classes=TINY_CLASSES, clips_per_class=5,
                                     recipe=SynthRecipe(clip_seconds=1.5))


@pytest.fixture(scope="session")
def tiny_features(tiny_corpus, tmp_path_factory):
    """PFV1 feature caches for every view of ``tiny_corpus``."""
    out = tmp_path_factory.mktemp("tiny_features")
    projector = StandInProjector(0)
    chunks = [(r, ch) for r in tiny_corpus.records
              for ch in chunk_clip(decode_and_resample(r), r, TINY_CLASSES)]
    paths = {}
    for view in ("pitch", "timbre", "waveform", "neuralogram"):
        paths[view] = out / f"{view}.pfv1"
        write_records(paths[view], (
            Record(r.clip_id, ch.chunk_index, view,
                   compute_view(view, ch.samples, projector, r.clip_id, ch.chunk_index))
            for r, ch in chunks))
    return paths


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance reporting ----------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, lines: list, number: int, title: str):
        self.lines, self.number, self.title = lines, number, title
        self.detail = ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, kind, exc, tb):
        secs = time.perf_counter() - self.t0
        if exc is None:
            verdict, why = "PASS", self.detail
        else:
            verdict, why = "FAIL", f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"[{self.number}] {verdict} {self.title} ({secs:.1f}s) {why}".rstrip()
        self.lines.append(line)
        print(line)
        return False


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c:`` records one PASS/FAIL line for the summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    return lambda number, title: _Criterion(lines, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s[1:s.index("]")])):
            terminalreporter.write_line(line)
