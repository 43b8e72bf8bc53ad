"""Pipeline stages over a resolved workspace; each stage checks its inputs first."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cache import Record, split_keys, write_records
from .config import RunConfig, Workspace
from .dataset import SynthRecipe, by_split, chunk_clip, decode_and_resample, generate_synthetic_corpus, load_manifest
from .features import VIEWS, FileProjector, StandInProjector, compute_view
from .fusion import FusionSpec, extract_embeddings, head_scores, load_embedding_tables, load_head, train_fusion_head
from .gradsuite import run_suite
from .metrics import MetricsReport, evaluate
from .trainer import TrainConfig, train_view

log = logging.getLogger(__name__)


class PrerequisiteError(RuntimeError):
    """A stage ran before the artifact it consumes was produced."""


def require(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(f"missing {what} {path}; run `{hint}` first")
    return path


def load_dataset(ws: Workspace):
    require(ws.manifest, "manifest", "polyfeat synth-data")
    require(ws.vocab, "label vocabulary", "polyfeat synth-data")
    return load_manifest(ws.manifest, ws.vocab)


def train_config(cfg: RunConfig, view: str | None = None, epochs: int | None = None) -> TrainConfig:
    t = cfg.train.model_dump()
    if t["seed"] is None:
        t["seed"] = cfg.seed
    if view is not None and view in cfg.view_train:
        t.update({k: v for k, v in cfg.view_train[view].model_dump().items() if v is not None})
    if epochs is not None:
        t["epochs"] = epochs
    return TrainConfig(**t)


# stages ----------------------------------------------------------------------

def synth_data(ws: Workspace):
    s = ws.cfg.dataset.synthetic
    recipe = SynthRecipe(clip_seconds=s.clip_seconds)
    corpus = generate_synthetic_corpus(ws.data_root, ws.cfg.seed, s.n_classes, s.clips_per_class, recipe)
    log.info("synthetic corpus: %d clips in %s", len(corpus.records), ws.data_root)
    return corpus


def _projector(ws: Workspace):
    if ws.neuralogram_source is None:
        return StandInProjector(ws.cfg.features.projector_seed)
    return FileProjector(ws.neuralogram_source)


def features(ws: Workspace, view: str) -> Path:
    records, vocab = load_dataset(ws)
    projector = _projector(ws) if view == "neuralogram" else None

    def rows():
        for r in records:
            for ch in chunk_clip(decode_and_resample(r), r, vocab.size):
                yield Record(r.clip_id, ch.chunk_index, view,
                             compute_view(view, ch.samples, projector, r.clip_id, ch.chunk_index))

    n = write_records(ws.features(view), rows())
    log.info("%s features: %d chunks -> %s", view, n, ws.features(view))
    return ws.features(view)


def train_encoder(ws: Workspace, view: str, resume: Path | None = None, max_steps: int | None = None):
    records, vocab = load_dataset(ws)
    feats = require(ws.features(view), f"{view} feature cache", f"polyfeat features --view {view}")
    splits = by_split(records)
    enc = ws.cfg.encoder.model_dump()
    result = train_view(view, feats, splits["train"], splits["val"], vocab.size, train_config(ws.cfg, view),
                        ws.checkpoint_dir, encoder_overrides=enc, resume=resume, max_steps=max_steps)
    log.info("%s encoder -> %s", view, result.final_path)
    return result.final_path


def embed(ws: Workspace, view: str) -> Path:
    ckpt = require(ws.encoder(view), f"{view} encoder checkpoint", f"polyfeat train-encoder --view {view}")
    feats = require(ws.features(view), f"{view} feature cache", f"polyfeat features --view {view}")
    n = extract_embeddings(view, ckpt, feats, ws.embeddings(view))
    log.info("%s embeddings: %d chunks -> %s", view, n, ws.embeddings(view))
    return ws.embeddings(view)


def _tables(ws: Workspace, spec: FusionSpec):
    for v in spec.views:
        require(ws.embeddings(v), f"{v} embedding cache", f"polyfeat embed --view {v}")
    return load_embedding_tables(spec, {v: ws.embeddings(v) for v in spec.views})


def _split_rows(tables, spec: FusionSpec, records, n_classes: int):
    keys = split_keys(tables[spec.views[0]], records)
    labels = {r.clip_id: r.multi_hot(n_classes) for r in records}
    y = np.stack([labels[c] for c, _ in keys]) if keys else np.zeros((0, n_classes), np.float32)
    return keys, y


def train_head(ws: Workspace, views) -> Path:
    spec = FusionSpec(tuple(views))
    records, vocab = load_dataset(ws)
    tables = _tables(ws, spec)
    splits = by_split(records)
    train = _split_rows(tables, spec, splits["train"], vocab.size)
    val = _split_rows(tables, spec, splits["val"], vocab.size)
    cfg = train_config(ws.cfg, epochs=ws.cfg.fusion.epochs)
    result = train_fusion_head(spec, tables, train, cfg, ws.checkpoint_dir, val=val,
                               hidden=ws.cfg.fusion.hidden, name=ws.head(spec.views).stem)
    log.info("head %s -> %s", spec.name, result.final_path)
    return result.final_path


def evaluate_head(ws: Workspace, views, split: str = "test") -> MetricsReport:
    spec = FusionSpec(tuple(views))
    ckpt = require(ws.head(spec.views), "head checkpoint", f"polyfeat train-head --views {','.join(spec.views)}")
    records, vocab = load_dataset(ws)
    head = load_head(ckpt)
    tables = _tables(ws, spec)
    keys, y = _split_rows(tables, spec, by_split(records)[split], vocab.size)
    scores = head_scores(head, tables, keys)
    report = evaluate(scores, y, [c for c, _ in keys], vocab.names)
    report.write(ws.report_dir, ws.report_stem(spec.views))
    log.info("eval %s: top5 chunk %.4f clip %.4f, top1 clip %.4f, mAP %.4f", spec.name,
             report.top5_chunk, report.top5_clip, report.top1_clip, report.map_macro)
    return report


def gradcheck_all(ws: Workspace) -> bool:
    g = ws.cfg.gradcheck
    results = run_suite(g.seed, g.coords, g.primitive_seeds, log=log.info)
    ws.report_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{r.name} seed {r.seed} ({r.seconds:.1f}s): {r.report.summary()}" for r in results]
    (ws.report_dir / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    body = [{"name": r.name, "seed": r.seed, "seconds": r.seconds, **asdict(r.report)} for r in results]
    (ws.report_dir / "gradcheck.json").write_text(json.dumps(body, indent=2) + "\n")
    return all(r.report.passed for r in results)


# orchestration ---------------------------------------------------------------

def _per_view_worker(stage: str, cfg_json: dict, base: str, view: str) -> str:
    ws = Workspace(RunConfig.model_validate(cfg_json), Path(base))
    return str({"features": features, "train-encoder": train_encoder, "embed": embed}[stage](ws, view))


def run_per_view(ws: Workspace, stage: str, views, jobs: int = 1) -> list[str]:
    """Run a per-view stage for each view, in parallel worker processes when ``jobs > 1``."""
    views = list(views)
    cfg_json = ws.cfg.model_dump(mode="json")
    base = str(ws.base)
    if jobs <= 1 or len(views) == 1:
        return [_per_view_worker(stage, cfg_json, base, v) for v in views]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_per_view_worker, stage, cfg_json, base, v) for v in views]
        return [f.result() for f in futures]


def head_specs(cfg: RunConfig) -> list[tuple[str, ...]]:
    fused = tuple(cfg.fusion.views)
    specs = [(v,) for v in fused] if cfg.fusion.single_view_heads and len(fused) > 1 else []
    return specs + [fused]


def pipeline(ws: Workspace, jobs: int = 1) -> list[tuple[tuple[str, ...], MetricsReport]]:
    if ws.cfg.dataset.manifest is None and not ws.manifest.exists():
        synth_data(ws)
    load_dataset(ws)
    needed = [v for v in VIEWS if v in ws.cfg.views or v in ws.cfg.fusion.views]
    for stage in ("features", "train-encoder", "embed"):
        run_per_view(ws, stage, needed, jobs)
    results = []
    for views in head_specs(ws.cfg):
        train_head(ws, views)
        results.append((views, evaluate_head(ws, views)))
    write_summary(ws.report_dir / "fusion_summary.csv", results)
    return results


def write_summary(path: Path, results) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["views", "top1_clip", "top5_chunk", "top5_clip", "map_macro"])
        for views, r in results:
            w.writerow(["+".join(views), repr(r.top1_clip), repr(r.top5_chunk), repr(r.top5_clip),
                        repr(r.map_macro)])
