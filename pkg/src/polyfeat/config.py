"""Run configuration: strict JSON, defaults filled, errors located by JSON pointer."""

from __future__ import annotations

import json
import os
import subprocess
from pathlib import Path
from typing import Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .features import VIEWS

CACHE_ENV = "PF_CACHE_DIR"


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer
        self.message = message


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Paths(_Strict):
    data_root: str = "data"
    cache_dir: str = "cache"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"


class SyntheticSection(_Strict):
    n_classes: int = Field(8, ge=6)  # top-5 needs at least 5 classes
    clips_per_class: int = Field(60, ge=5)
    clip_seconds: float = Field(3.0, gt=0)

    @field_validator("n_classes")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("must be even (half pitch classes, half timbre classes)")
        return v


class DatasetSection(_Strict):
    manifest: Optional[str] = None
    vocab: Optional[str] = None
    synthetic: SyntheticSection = SyntheticSection()


class FeaturesSection(_Strict):
    neuralogram_source: str = "stand-in"
    projector_seed: int = 0


class TrainSection(_Strict):
    epochs: int = Field(300, ge=1)
    lr_start: float = Field(2e-4, gt=0)
    lr_end: float = Field(1e-6, gt=0)
    batch_size: int = Field(32, ge=1)
    seed: Optional[int] = None
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    clip_norm: Optional[float] = Field(5.0, gt=0)
    checkpoint_every: int = Field(10, ge=0)

    @model_validator(mode="after")
    def _order(self):
        if not self.lr_start > self.lr_end:
            raise ValueError("lr_start must exceed lr_end")
        return self


class ViewTrainOverrides(_Strict):
    epochs: Optional[int] = Field(None, ge=1)
    lr_start: Optional[float] = Field(None, gt=0)
    lr_end: Optional[float] = Field(None, gt=0)
    batch_size: Optional[int] = Field(None, ge=1)
    clip_norm: Optional[float] = Field(None, gt=0)


class EncoderSection(_Strict):
    d_model: int = Field(64, ge=1)
    n_layers: int = Field(6, ge=2)
    n_heads: int = Field(12, ge=1)
    head_dim: int = Field(16, ge=1)
    mlp_dim: int = Field(256, ge=1)
    dropout: float = Field(0.3, ge=0, lt=1)
    head_hidden: int = Field(2048, ge=1)
    conv_filters: int = Field(128, ge=1)
    conv_length: int = Field(200, ge=1)

    @field_validator("n_layers")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("must be even")
        return v


def _check_views(views: list[str]) -> list[str]:
    if not views:
        raise ValueError("needs at least one view")
    for v in views:
        if v not in VIEWS:
            raise ValueError(f"unknown view {v!r}; expected one of {', '.join(VIEWS)}")
    if len(set(views)) != len(views):
        raise ValueError("duplicate view")
    return sorted(views, key=VIEWS.index)


class FusionSection(_Strict):
    views: list[str] = list(VIEWS)
    epochs: int = Field(100, ge=1)
    hidden: int = Field(2048, ge=1)
    single_view_heads: bool = True

    @field_validator("views")
    @classmethod
    def _views(cls, v):
        return _check_views(v)


class GradcheckSection(_Strict):
    seed: int = 0
    coords: int = Field(20, ge=1)
    primitive_seeds: int = Field(3, ge=1)


class RunConfig(_Strict):
    seed: int = 0
    paths: Paths = Paths()
    dataset: DatasetSection = DatasetSection()
    features: FeaturesSection = FeaturesSection()
    views: list[str] = list(VIEWS)
    encoder: EncoderSection = EncoderSection()
    train: TrainSection = TrainSection()
    view_train: dict[str, ViewTrainOverrides] = {}
    fusion: FusionSection = FusionSection()
    gradcheck: GradcheckSection = GradcheckSection()

    @field_validator("views")
    @classmethod
    def _views(cls, v):
        return _check_views(v)

    @field_validator("view_train")
    @classmethod
    def _known(cls, v):
        for k in v:
            if k not in VIEWS:
                raise ValueError(f"unknown view {k!r}")
        return v


def _pointer(loc: tuple[Union[str, int], ...]) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in loc)


def parse_config(data) -> RunConfig:
    """Validate a decoded JSON object; the first problem is reported with its pointer."""
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    try:
        return RunConfig.model_validate(data, strict=True)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(_pointer(err["loc"]), err["msg"]) from None


def load_config(path: str | Path | None) -> tuple[RunConfig, Path]:
    """Read ``path`` (or use pure defaults) and return the config plus its base directory."""
    if path is None:
        return parse_config({}), Path.cwd()
    path = Path(path)
    if not path.exists():
        raise ConfigError("", f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_config(data), path.resolve().parent


class Workspace:
    """Resolved locations of every artifact a run reads or writes."""

    def __init__(self, cfg: RunConfig, base: Path):
        def resolve(p: str) -> Path:
            q = Path(os.path.expandvars(p)).expanduser()
            return q if q.is_absolute() else base / q

        self.cfg = cfg
        self.base = base
        self.data_root = resolve(cfg.paths.data_root)
        env = os.environ.get(CACHE_ENV)
        self.cache_dir = resolve(env) if env else resolve(cfg.paths.cache_dir)
        self.checkpoint_dir = resolve(cfg.paths.checkpoint_dir)
        self.report_dir = resolve(cfg.paths.report_dir)
        self.manifest = resolve(cfg.dataset.manifest) if cfg.dataset.manifest else self.data_root / "manifest.csv"
        self.vocab = resolve(cfg.dataset.vocab) if cfg.dataset.vocab else self.manifest.parent / "vocab.txt"
        src = cfg.features.neuralogram_source
        self.neuralogram_source = None if src == "stand-in" else resolve(src)

    def check(self) -> None:
        """Paths named explicitly in the config must already exist."""
        if self.cfg.dataset.manifest and not self.manifest.exists():
            raise ConfigError("/dataset/manifest", f"{self.manifest} does not exist")
        if self.cfg.dataset.vocab and not self.vocab.exists():
            raise ConfigError("/dataset/vocab", f"{self.vocab} does not exist")
        if self.neuralogram_source is not None and not self.neuralogram_source.exists():
            raise ConfigError("/features/neuralogram_source", f"{self.neuralogram_source} does not exist")

    def features(self, view: str) -> Path:
        return self.cache_dir / "features" / f"{view}.pfv1"

    def embeddings(self, view: str) -> Path:
        return self.cache_dir / "embeddings" / f"{view}.pfv1"

    def encoder(self, view: str) -> Path:
        return self.checkpoint_dir / f"encoder_{view}.pfck"

    def head(self, views) -> Path:
        return self.checkpoint_dir / f"head_{'+'.join(views)}.pfck"

    def report_stem(self, views) -> str:
        return f"eval_{'+'.join(views)}"


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=here, capture_output=True, text=True, timeout=5, check=True,
        )
        desc = out.stdout.strip()
        if desc:
            return f"{__version__}+g{desc}" if not desc.startswith("v") else desc
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def echo_config(cfg: RunConfig, ws: Workspace, command: str) -> Path:
    """Write the fully resolved config next to the reports before any compute."""
    ws.report_dir.mkdir(parents=True, exist_ok=True)
    out = ws.report_dir / "run_config.json"
    body = {
        "version": version_string(),
        "command": command,
        "config": cfg.model_dump(mode="json"),
        "resolved_paths": {
            "data_root": str(ws.data_root),
            "cache_dir": str(ws.cache_dir),
            "checkpoint_dir": str(ws.checkpoint_dir),
            "report_dir": str(ws.report_dir),
            "manifest": str(ws.manifest),
            "vocab": str(ws.vocab),
        },
    }
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out)
    return out
