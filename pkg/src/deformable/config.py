"""Line-based ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored.  Unknown or repeated keys are
errors, as are values that fail the owning module's preconditions.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from . import latent as L
from . import net
from . import warp as W


class ConfigError(ValueError):
    pass


FAMILIES = ("rotation", "affine", "transcale", "tps")
METHODS = ("es", "gd", "esgd")


@dataclass
class RunConfig:
    # data
    source: str = "mlxtend"  # mlxtend | idx | prepared
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    data_dir: str = ""
    n_train: int = 2000
    n_test: int = 2000
    per_class: int = 0
    rotate: bool = True
    clutter: str = "none"  # none | flanking | random
    # transformation family
    family: str = "rotation"
    tps_rows: int = 4
    tps_cols: int = 4
    # latent search at evaluation
    latent_method: str = "esgd"
    es_count: int = 8
    gd_steps: int = 10
    gd_lr: float = 0.0  # 0 = family default
    penalty: float = 1.0
    # latent search while training
    train_latent_method: str = "es"
    # networks
    net_spec: str = "32c5-p2-32c5-p2-256f"
    loc_spec: str = "16c5-p2-16c5-p2-64f"
    stack_spec: str = "32c5-p2-32c5-p2-256f"
    # optimisation
    lr: float = 0.01
    momentum: float = 0.9
    lam: float = 1e-4
    epochs: int = 10
    batch: int = 32
    seed: int = 0
    pretrain_epochs: int = 15
    pretrain_per_class: int = 100
    stack_epochs: int = 10
    cstn_loss: str = "hinge"  # hinge | softmax
    cstn_schedule: str = "alternate"  # alternate | joint
    # artifacts
    init_model: str = ""
    model: str = ""
    stack_model: str = ""
    masks: str = ""
    tau: float = 0.25
    metric: str = "full"  # full | half | henriques
    bin_width: float = 15.0
    figures: bool = True
    out_dir: str = "runs/default"

    # ------------------------------------------------------------------

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.source in ("mlxtend", "idx", "prepared"), f"source must be mlxtend, idx or prepared, got {self.source!r}")
        if self.source == "idx":
            need(all([self.train_images, self.train_labels, self.test_images, self.test_labels]),
                 "source = idx needs train_images, train_labels, test_images and test_labels")
        if self.source == "prepared":
            need(bool(self.data_dir), "source = prepared needs data_dir")
        need(self.n_train >= 1 and self.n_test >= 1, "n_train and n_test must be >= 1")
        need(self.per_class >= 0 and self.pretrain_per_class >= 1, "per-class counts must be positive")
        need(self.clutter in ("none", "flanking", "random"), f"unknown clutter {self.clutter!r}")
        need(self.family in FAMILIES, f"unknown family {self.family!r}")
        need(self.tps_rows >= 2 and self.tps_cols >= 2, "tps grid must be at least 2x2")
        need(self.latent_method in METHODS and self.train_latent_method in METHODS,
             "latent methods must be es, gd or esgd")
        need(self.es_count >= 1, "es_count must be >= 1")
        need(self.gd_steps >= 0, "gd_steps must be >= 0")
        need(self.gd_lr >= 0 and self.penalty >= 0, "gd_lr and penalty must be >= 0")
        need(0.0 <= self.tau <= 1.0, "tau must lie in [0, 1]")
        need(self.bin_width > 0, "bin_width must be positive")
        need(self.metric in ("full", "half", "henriques"), f"unknown metric {self.metric!r}")
        need(self.cstn_loss in ("hinge", "softmax"), "cstn_loss must be hinge or softmax")
        need(self.cstn_schedule in ("alternate", "joint"), "cstn_schedule must be alternate or joint")
        need(self.pretrain_epochs >= 0 and self.stack_epochs >= 0, "epoch counts must be >= 0")
        for spec in (self.net_spec, self.loc_spec, self.stack_spec):
            try:
                net.parse_spec(spec)
            except ValueError as exc:
                raise ConfigError(f"bad net spec {spec!r}: {exc}") from exc
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def family_obj(self) -> W.Family:
        return W.family_from_name(self.family, self.tps_rows, self.tps_cols)

    def train_config(self, epochs: int | None = None) -> net.TrainConfig:
        return net.TrainConfig(lam=self.lam, learning_rate=self.lr, momentum=self.momentum,
                               batch_size=self.batch, epochs=self.epochs if epochs is None else epochs,
                               seed=self.seed)

    def latent_config(self, method: str | None = None) -> L.LatentSearchConfig:
        family = self.family_obj
        if family.kind == "rotation":
            es_set = L.rotation_set(self.es_count)
        else:
            es_set = W.identity_params(family)[None]
        return L.LatentSearchConfig(family, method or self.latent_method, es_set, self.gd_steps,
                                    self.gd_lr or None, self.penalty)

    def to_text(self, header: str = "") -> str:
        lines = [f"# {line}" for line in header.splitlines()] if header else []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key, raw):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text())


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    kw = {k: v for k, v in kw.items() if v is not None}
    return dataclasses.replace(cfg, **kw).validate()
