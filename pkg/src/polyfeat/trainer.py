"""Supervised training loop shared by encoders and fusion heads.

Randomness is keyed by position rather than drawn from a running stream:
the batch order of epoch e comes from ``default_rng([seed, 1, e])`` and the
dropout masks of step s from ``default_rng([seed, 2, s])``. A resumed run
therefore needs only the step counter to continue bit-identically.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .autodiff import NonFiniteError, Tensor, backward, no_grad, ops
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import top_k_accuracy

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "step", "lr", "train_loss", "val_top5"]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 5.0
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr_start > self.lr_end > 0:
            raise ValueError("need lr_start > lr_end > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Cosine decay from lr_start at epoch 0 to lr_end at the last epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        return cfg.lr_start
    if epoch == cfg.epochs - 1:
        return cfg.lr_end
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + math.cos(math.pi * epoch / (cfg.epochs - 1)))


def gradient_clip(grads: list[np.ndarray], max_norm: float = 5.0) -> list[np.ndarray]:
    """Rescale so the global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if not math.isfinite(norm):
        raise TrainingError("non-finite gradient norm")
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * g.dtype.type(scale) for g in grads]


class Adam:
    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (lr / bc1) * m / (np.sqrt(v / bc2) + c.adam_eps)
            p.data -= update.astype(p.dtype)


class Model(Protocol):
    params: dict[str, Tensor]

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> Tensor:
        ...

    def describe(self) -> dict:
        ...


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_val: float = -1.0
    epoch_loss_sum: float = 0.0
    epoch_batches: int = 0


@dataclass
class FitResult:
    final_path: Path
    best_path: Path | None
    history: list[dict] = field(default_factory=list)
    state: TrainState = field(default_factory=TrainState)


def predict(model: Model, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode scores for every row of ``x``; each row is processed independently."""
    out = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            out.append(model.forward(x[s:s + batch_size], train=False).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 0))


def save_state(path, model: Model, opt: Adam, cfg: TrainConfig, state: TrainState, kind: str) -> None:
    tensors = {f"param/{k}": p.data for k, p in model.params.items()}
    tensors.update({f"adam.m/{k}": a for k, a in opt.m.items()})
    tensors.update({f"adam.v/{k}": a for k, a in opt.v.items()})
    config = {
        "kind": kind,
        "model": model.describe(),
        "train": asdict(cfg),
        "state": asdict(state) | {"adam_t": opt.t},
    }
    save_checkpoint(path, config, tensors)


def split_tensors(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    n = len(prefix)
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix)}


def restore_state(path, model: Model, opt: Adam) -> TrainState:
    config, tensors = load_checkpoint(path)
    if config.get("model") != model.describe():
        raise TrainingError(f"{path}: checkpoint model {config.get('model')} does not match {model.describe()}")
    params = split_tensors(tensors, "param/")
    for k, p in model.params.items():
        p.data = params[k].astype(p.dtype).copy()
    opt.m = {k: a.copy() for k, a in split_tensors(tensors, "adam.m/").items()}
    opt.v = {k: a.copy() for k, a in split_tensors(tensors, "adam.v/").items()}
    st = dict(config["state"])
    opt.t = st.pop("adam_t")
    return TrainState(**st)


def _truncate_log(path: Path, epochs_done: int) -> None:
    """Keep the header and the rows of epochs finished before the resume point."""
    rows = []
    if path.exists():
        with path.open(newline="") as fh:
            rows = [r for r in csv.reader(fh)][1:]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        w.writerows(r for r in rows if r and int(r[0]) < epochs_done)


def fit(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    out_dir,
    name: str,
    kind: str = "encoder",
    x_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
    resume: str | Path | None = None,
    max_steps: int | None = None,
    until: Callable[[dict], bool] | None = None,
    sample_ids: list | None = None,
) -> FitResult:
    """Adam on mean Huber loss with a cosine learning-rate schedule.

    Writes ``<name>.pfck`` (final), ``<name>.best.pfck`` (best validation
    top-5), ``<name>.last.pfck`` every ``checkpoint_every`` epochs and a
    ``<name>.log.csv`` with one row per epoch. ``max_steps`` stops early
    (checkpointing at that step); ``until(row)`` is asked after each epoch
    and stops training when it returns True.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(x)
    if n == 0:
        raise TrainingError("empty training set")
    nb = math.ceil(n / cfg.batch_size)
    opt = Adam(model.params, cfg)
    state = TrainState()
    log_path = out_dir / f"{name}.log.csv"
    if resume is not None:
        state = restore_state(resume, model, opt)
        _truncate_log(log_path, state.epoch)
    else:
        with log_path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_COLUMNS)

    final_path = out_dir / f"{name}.pfck"
    best_path = out_dir / f"{name}.best.pfck"
    history: list[dict] = []
    names = list(model.params)
    total_steps = cfg.epochs * nb if max_steps is None else min(max_steps, cfg.epochs * nb)

    while state.step < total_steps:
        epoch = state.step // nb
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(n)
        b = state.step - epoch * nb
        idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        rng = np.random.default_rng([cfg.seed, 2, state.step])

        for p in model.params.values():
            p.grad = None
        try:
            loss = ops.huber(model.forward(x[idx], train=True, rng=rng), y[idx])
            backward(loss, leaves=model.params.values())
        except NonFiniteError as exc:
            ids = [sample_ids[i] for i in idx] if sample_ids is not None else idx.tolist()
            raise TrainingError(f"non-finite loss at step {state.step} (lr {lr:g}), batch {ids}: {exc}") from None
        loss_val = float(loss.data)
        grads = [model.params[k].grad for k in names]
        if cfg.clip_norm is not None:
            grads = gradient_clip(grads, cfg.clip_norm)
        opt.step(dict(zip(names, grads)), lr)
        state.step += 1
        state.epoch_loss_sum += loss_val
        state.epoch_batches += 1

        if state.step % nb == 0:
            row = {
                "epoch": epoch,
                "step": state.step,
                "lr": lr,
                "train_loss": state.epoch_loss_sum / state.epoch_batches,
                "val_top5": None,
            }
            if x_val is not None and len(x_val):
                val = top_k_accuracy(predict(model, x_val), y_val, min(5, y_val.shape[1]))
                row["val_top5"] = val
                if val > state.best_val:
                    state.best_val = val
                    save_state(best_path, model, opt, cfg, state, kind)
            state.epoch = epoch + 1
            state.epoch_loss_sum, state.epoch_batches = 0.0, 0
            history.append(row)
            with log_path.open("a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(
                    ["" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c]
                     for c in LOG_COLUMNS])
            log.info("%s epoch %d loss %.5f val_top5 %s", name, epoch, row["train_loss"], row["val_top5"])
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_state(out_dir / f"{name}.last.pfck", model, opt, cfg, state, kind)
            if until is not None and until(row):
                break

    save_state(final_path, model, opt, cfg, state, kind)
    return FitResult(final_path, best_path if best_path.exists() else None, history, state)


def train_view(
    view: str,
    features,
    train_records,
    val_records,
    n_classes: int,
    cfg: TrainConfig,
    out_dir,
    encoder_overrides: dict | None = None,
    resume=None,
    max_steps: int | None = None,
) -> FitResult:
    """Train one view's encoder from scratch on its cached features.

    ``features`` is a PFV1 path or an already loaded table. Every train and
    val clip must be fully cached; that is checked before the first step.
    """
    from .cache import assemble, load_table
    from .encoder import EncoderConfig, EncoderModel

    table = features if isinstance(features, dict) else load_table(features, view)
    keys, x, y = assemble(table, train_records, n_classes)
    if not keys:
        raise TrainingError(f"no training chunks for view {view!r}")
    _, xv, yv = assemble(table, val_records, n_classes)
    enc_cfg = EncoderConfig(view=view, n_classes=n_classes, **(encoder_overrides or {}))
    model = EncoderModel(enc_cfg, seed=cfg.seed)
    return fit(model, x, y, cfg, out_dir, f"encoder_{view}", kind="encoder",
               x_val=xv if len(xv) else None, y_val=yv if len(xv) else None,
               resume=resume, max_steps=max_steps, sample_ids=[f"{c}#{i}" for c, i in keys])
