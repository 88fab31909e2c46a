"""Run configuration: one TOML file, one section per concern, unknown keys rejected."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from countlab.losses import LossConfig
from countlab.patchgroup import PAPER_RATIOS
from countlab.rats import STRATEGIES
from countlab.synthdata import SynthConfig


@dataclass(frozen=True)
class DataConfig:
    count: int = 2000
    holdout: int = 200
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("data.count must be >= 1")
        if not 0 <= self.holdout < self.count:
            raise ValueError("data.holdout must lie in [0, count)")


@dataclass(frozen=True)
class GroupConfig:
    k: int = 4
    M: int = 112
    ratios: tuple[float, ...] = PAPER_RATIOS
    p: int = 14

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.k != len(self.ratios):
            raise ValueError(f"groups.k = {self.k} but {len(self.ratios)} ratios given")
        if self.p < 1 or self.M % self.p:
            raise ValueError("groups.M must be a positive multiple of groups.p")


@dataclass(frozen=True)
class HeadConfig:
    n: int = 4
    d_anchor: int = 64
    temperature: float = 0.07
    categories: tuple[str, ...] = ("negative tumor cell", "positive tumor cell")

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.n < 1 or self.temperature <= 0:
            raise ValueError("head.n must be >= 1 and head.temperature > 0")


@dataclass(frozen=True)
class StudentConfig:
    d_enc: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    layer_ids: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "layer_ids", tuple(int(i) for i in self.layer_ids))
        if self.d_enc % self.heads:
            raise ValueError("student.d_enc must be divisible by student.heads")


@dataclass(frozen=True)
class TeacherConfig:
    noise: tuple[float, ...] = (0.0, 5.0)
    pretrain_epochs: int = 0
    pretrain_lr: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "noise", tuple(float(s) for s in self.noise))
        if not self.noise:
            raise ValueError("teachers.noise must list at least one teacher")
        if any(s < 0 for s in self.noise):
            raise ValueError("teacher noise must be >= 0")


@dataclass(frozen=True)
class ScheduleConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    min_lr: float = 1e-6
    warmup_epochs: int = 2
    weight_decay: float = 0.05

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.min_lr < 0 or self.warmup_epochs < 0:
            raise ValueError("invalid schedule values")


@dataclass(frozen=True)
class AgglomerateConfig(ScheduleConfig):
    strategy: str = "rats"
    tdrop_keep: float = 0.5
    per_group: bool = False

    def __post_init__(self):
        super().__post_init__()
        if self.strategy not in STRATEGIES:
            raise ValueError(f"agglomerate.strategy must be one of {STRATEGIES}")
        if not 0.0 <= self.tdrop_keep <= 1.0:
            raise ValueError("agglomerate.tdrop_keep must lie in [0, 1]")


@dataclass(frozen=True)
class FinetuneConfig(ScheduleConfig):
    weight_decay: float = 0.0
    unfreeze: bool = False


@dataclass(frozen=True)
class EvalConfig:
    grade_edges: tuple[float, ...] = (0.01, 0.5)
    centroid_threshold: float = 0.3
    centroid_min_distance: int = 1

    def __post_init__(self):
        object.__setattr__(self, "grade_edges", tuple(float(e) for e in self.grade_edges))
        if list(self.grade_edges) != sorted(self.grade_edges):
            raise ValueError("eval.grade_edges must be ascending")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    groups: GroupConfig = field(default_factory=GroupConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    teachers: TeacherConfig = field(default_factory=TeacherConfig)
    loss: LossConfig = field(default_factory=lambda: LossConfig(ot_iters=4000))
    agglomerate: AgglomerateConfig = field(default_factory=AgglomerateConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if len(self.loss.lambda_) != len(self.head.categories):
            raise ValueError("loss.lambda_ needs one weight per category")
        if self.data.synth.image_size < self.groups.M:
            raise ValueError("synthetic images are smaller than the crop size M")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=int(seed))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(default, data: dict, path: str):
    """Overlay ``data`` on the dataclass instance ``default``, recursing into nested sections."""
    if not isinstance(data, dict):
        raise ValueError(f"[{path}] must be a table")
    known = {f.name for f in fields(default)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown key(s) in [{path or 'top level'}]: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        current = getattr(default, name)
        if is_dataclass(current):
            kwargs[name] = _build(current, value, f"{path}.{name}".strip("."))
        else:
            kwargs[name] = value
    return replace(default, **kwargs)


def from_dict(data: dict) -> RunConfig:
    if not data:
        raise ValueError("configuration is empty")
    return _build(RunConfig(), data, "")


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        return from_dict(tomllib.load(fh))
