"""Pipeline settings shared by the library entry points and the CLI."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace

from .radon_core import DEFAULT_N_TAU, DEFAULT_N_THETA
from .scan_ingest import DEFAULT_GRID_SIZE, DEFAULT_ROI_SIDE, DEFAULT_Z_MIN, BevConfig

ENV_PREFIX = "RINGLOC_"


@dataclass(frozen=True)
class Config:
    roi_side: float = DEFAULT_ROI_SIDE  # 140 m square ROI around the sensor
    grid_size: int = DEFAULT_GRID_SIZE  # 120 x 120 BEV -> 1.17 m/pixel
    n_theta: int = DEFAULT_N_THETA
    n_tau: int = DEFAULT_N_TAU
    z_min: float = DEFAULT_Z_MIN
    normalize: bool = True
    weighted: bool = False

    @property
    def bev(self) -> BevConfig:
        return BevConfig(self.roi_side, self.grid_size)

    @property
    def resolution(self) -> float:
        return self.roi_side / self.grid_size

    def with_env(self, environ=None) -> "Config":
        """Apply ``RINGLOC_<FIELD>`` overrides, e.g. ``RINGLOC_N_THETA=60``."""
        environ = os.environ if environ is None else environ
        updates = {}
        for f in fields(self):
            raw = environ.get(ENV_PREFIX + f.name.upper())
            if raw is None:
                continue
            kind = type(getattr(self, f.name))
            if kind is bool:
                updates[f.name] = raw.strip().lower() in ("1", "true", "yes", "on")
            else:
                updates[f.name] = kind(raw)
        return replace(self, **updates)
