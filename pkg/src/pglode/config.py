"""Run configuration: one flat, auditable home for every default.

Config files are plain ``key=value`` lines (``#`` starts a comment); CLI
flags override file values, which override the defaults below. Commands echo
the fully resolved configuration into their output directory so any result
can be traced back to exact settings.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .grid import GridSpec
from .models import ModelConfig
from .synth import SynthConfig
from .training import LossConfig


@dataclass(frozen=True)
class RunConfig:
    # grid
    height: int = 64
    width: int = 64
    lat0: float = 6.5
    lon0: float = 66.5
    cell_deg: float = 0.25
    # synthetic data
    n_days: int = 400
    seed: int = 42
    ar1_rain: float = 0.62
    ar1_cape: float = 0.70
    cape_trigger: float = 1465.0
    omega_trigger: float = -0.04
    burst_intensity: float = 25.0
    burst_radius: int = 0
    noise_scale: float = 1.0
    # split / tiling
    train_frac: float = 0.8
    tile_size: int = 32
    # model
    history_days: int = 3
    lead_days: int = 1
    latent_channels: int = 16
    hidden_channels: int = 32
    rk4_steps: int = 8
    convlstm_hidden: int = 28
    beta_init: float = 2.0
    gated: bool = True
    # loss / optimization
    lambda_extreme: float = 5.0
    bce_weight: float = 1.0
    learning_rate: float = 6e-3
    epochs: int = 15
    batch_size: int = 4
    # paths
    dataset: str = "runs/dataset.pgl1"
    out_dir: str = "runs"

    # -- derived sub-configs (each constructor revalidates its own ranges)

    def grid_spec(self) -> GridSpec:
        return GridSpec(height=self.height, width=self.width, lat0=self.lat0,
                        lon0=self.lon0, cell_deg=self.cell_deg)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            spec=self.grid_spec(), n_days=self.n_days, seed=self.seed,
            ar1_rain=self.ar1_rain, ar1_cape=self.ar1_cape,
            cape_trigger=self.cape_trigger, omega_trigger=self.omega_trigger,
            burst_intensity=self.burst_intensity, burst_radius=self.burst_radius,
            noise_scale=self.noise_scale,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            history_days=self.history_days, lead_days=self.lead_days,
            latent_channels=self.latent_channels,
            hidden_channels=self.hidden_channels, rk4_steps=self.rk4_steps,
            seed=self.seed, gated=self.gated,
            convlstm_hidden=self.convlstm_hidden, beta_init=self.beta_init,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            lambda_extreme=self.lambda_extreme, bce_weight=self.bce_weight,
            learning_rate=self.learning_rate, epochs=self.epochs,
            batch_size=self.batch_size,
        )

    def validate(self) -> "RunConfig":
        """Build every sub-config once so all range checks fire."""
        self.synth_config()
        self.model_config()
        self.loss_config()
        if not (0.0 < self.train_frac < 1.0):
            raise ValueError(f"train_frac must be in (0, 1), got {self.train_frac}")
        if self.tile_size < 1:
            raise ValueError(f"tile_size must be >= 1, got {self.tile_size}")
        return self

    # -- parsing and provenance

    def to_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"

    def with_overrides(self, **overrides) -> "RunConfig":
        coerced = {k: _coerce(k, v) for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **coerced)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        values: dict[str, object] = {}
        text = Path(path).read_text(encoding="utf-8")
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = _coerce(key.strip(), val.strip())
        return cls(**values)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, value):
    if key not in _FIELD_TYPES:
        known = ", ".join(sorted(_FIELD_TYPES))
        raise ValueError(f"unknown config key {key!r} (known keys: {known})")
    kind = _FIELD_TYPES[key]
    if not isinstance(value, str):
        return value
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            lowered = value.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return value
    except ValueError as exc:
        raise ValueError(f"config key {key}: {exc}") from None
