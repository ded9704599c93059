"""Run configuration: flat ``section.key = value`` text files.

Blank lines and ``#`` comments are ignored. Every key must be known; values
are coerced to the type of the default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .anomalymix import MixPolicy
from .losses import LossConfig
from .model import NONLINEARITIES, TrainConfig
from .scenegen import DEFAULT_PALETTE, SceneSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0

    scene_height: int = 64
    scene_width: int = 64
    scene_num_inlier_classes: int = 4
    scene_noise_sigma: float = 0.04
    scene_palette: str = ";".join(",".join(str(v) for v in c) for c in DEFAULT_PALETTE)

    data_train: int = 64
    data_val: int = 16
    data_test: int = 32
    data_pool_size: int = 32
    data_pure_every: int = 4

    model_num_filters: int = 32
    model_kernel_size: int = 5
    model_nonlinearity: str = "cos"
    model_filter_scale: float = 3.0

    pretrain_epochs: int = 20
    pretrain_batch_size: int = 16
    pretrain_learning_rate: float = 1e-2

    train_epochs: int = 20
    train_batch_size: int = 16
    train_learning_rate: float = 3e-2
    train_beta_m: float = 0.9
    train_beta_v: float = 0.999
    train_eps: float = 1e-8
    train_outlier_batch_fraction: float = 0.5

    loss_m_in: float = -12.0
    loss_m_out: float = -6.0
    loss_lambda: float = 0.1
    loss_beta1: float = 5e-4
    loss_beta2: float = 3e-6
    loss_a_min: float = 1.05
    loss_ebm_all_pixels: bool = False

    mix_scale_min: float = 0.5
    mix_scale_max: float = 2.0
    mix_allow_hflip: bool = True
    mix_max_paste_attempts: int = 20
    mix_paste_min: int = 1
    mix_paste_max: int = 3
    mix_probability: float = 1.0
    mix_max_anomaly_fraction: float = 0.25

    eval_kernel_size: int = 7
    eval_sigma: float = 1.0
    eval_bins: int = 15
    eval_tpr_target: float = 0.95

    ablate_fixed_penalty: float = 4.0
    ablate_seeds: int = 3

    # ------------------------------------------------------------------

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            height=self.scene_height,
            width=self.scene_width,
            num_inlier_classes=self.scene_num_inlier_classes,
            noise_sigma=self.scene_noise_sigma,
            palette=parse_palette(self.scene_palette),
        )

    def sizes(self) -> dict:
        return {"train": self.data_train, "val": self.data_val, "test": self.data_test}

    def loss(self) -> LossConfig:
        return LossConfig(
            m_in=self.loss_m_in,
            m_out=self.loss_m_out,
            lam=self.loss_lambda,
            beta1=self.loss_beta1,
            beta2=self.loss_beta2,
            a_min=self.loss_a_min,
            ebm_all_pixels=self.loss_ebm_all_pixels,
        )

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.pretrain_epochs,
            batch_size=self.pretrain_batch_size,
            learning_rate=self.pretrain_learning_rate,
            betas=(self.train_beta_m, self.train_beta_v),
            eps=self.train_eps,
            seed=self.seed,
            outlier_batch_fraction=0.0,
        )

    def train_config(self, loss: LossConfig | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.train_epochs,
            batch_size=self.train_batch_size,
            learning_rate=self.train_learning_rate,
            betas=(self.train_beta_m, self.train_beta_v),
            eps=self.train_eps,
            seed=self.seed,
            loss=loss or self.loss(),
            outlier_batch_fraction=self.train_outlier_batch_fraction,
        )

    def mix_policy(self) -> MixPolicy:
        return MixPolicy(
            scale_range=(self.mix_scale_min, self.mix_scale_max),
            allow_hflip=self.mix_allow_hflip,
            max_paste_attempts=self.mix_max_paste_attempts,
            paste_per_image=(self.mix_paste_min, self.mix_paste_max),
            mix_probability=self.mix_probability,
            max_anomaly_fraction=self.mix_max_anomaly_fraction,
        )

    @property
    def smoothing(self) -> tuple[int, float]:
        return (self.eval_kernel_size, self.eval_sigma)

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else replace(self, seed=seed)

    def validate(self) -> "RunConfig":
        """Build every derived object once so bad values surface as ConfigError."""
        if self.model_nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"model.nonlinearity must be one of {sorted(NONLINEARITIES)}")
        try:
            self.scene_spec()
            self.loss()
            self.pretrain_config()
            self.train_config()
            self.mix_policy()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.ablate_seeds < 1:
            raise ConfigError("ablate.seeds must be >= 1")
        return self

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            key = _key_of(f.name)
            v = getattr(self, f.name)
            lines.append(f"{key} = {format_value(v)}")
        return "\n".join(lines) + "\n"


def _key_of(name: str) -> str:
    for prefix in ("scene", "data", "model", "pretrain", "train", "loss", "mix", "eval", "ablate"):
        if name.startswith(prefix + "_"):
            return f"{prefix}.{name[len(prefix) + 1 :]}"
    return name


_FIELD_BY_KEY = {_key_of(f.name): f for f in fields(RunConfig)}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_palette(text: str):
    try:
        colours = tuple(tuple(float(x) for x in c.split(",")) for c in text.split(";") if c.strip())
    except ValueError as exc:
        raise ConfigError(f"bad palette {text!r}: {exc}") from exc
    if any(len(c) != 3 for c in colours):
        raise ConfigError(f"palette entries need 3 components: {text!r}")
    return colours


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            v = float(raw)
            if math.isnan(v):
                raise ValueError("NaN is not allowed")
            return v
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{lineno}"
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _FIELD_BY_KEY:
            raise ConfigError(f"{where}: unknown key {key!r}")
        f = _FIELD_BY_KEY[key]
        if f.name in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[f.name] = _coerce(raw, f.default, where)
    try:
        cfg = RunConfig(**values)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return cfg.validate()


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from exc
    return parse_config(text, str(p))
