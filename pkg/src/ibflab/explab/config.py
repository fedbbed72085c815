"""Experiment configuration: a single TOML file with nested tables, every
value overridable from the command line via --set key=value."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ibflab import geometry
from ibflab.covmodel import IsotropicModel
from ibflab.explab import regions


@dataclass
class ExperimentConfig:
    """Everything a run needs: model, discretization, replication, targets.

    Initial measures are atomless by construction (uniform on a descriptor
    or centered Gaussian).  save_times must lie on the dt grid and within
    the horizon.
    """

    experiment: str = "martingale"
    d: int = 2
    alpha: float = 0.05
    ell: float = 1.0
    n_particles: int = 8
    replicates: int = 100
    dt: float = 1e-2
    horizon: float = 1.0
    save_times: tuple = (1.0,)
    master_seed: int = 20_240_601
    jitter: float = 1e-12
    output_dir: str = "out"
    # initial measure: "uniform" on the named set, or "gaussian" with scale
    initial_kind: str = "uniform"
    initial_scale: float = 1.0
    # primary set (markers / initial support): ball/box/cylinder spec
    set_kind: str = "ball"
    set_center: tuple = (0.0, 0.0)
    set_radius: float = 1.0
    set_lo: tuple = (-1.0, -1.0)
    set_hi: tuple = (1.0, 1.0)
    set_half_length: float = 1.0
    set_axis: tuple = (1.0, 0.0)
    # scoring regions for dispersion experiments
    test_regions: tuple = (("halfspace", 0.0), ("ball", 1.0))
    # experiment-specific knobs
    n_markers: int = 64
    qr_every: int = 10
    separations: tuple = (0.5, 2.0)
    distance_samples: int = 2000
    omega_thresholds: tuple = (0.001, 0.01, 0.1)
    projection_seed: int = 0

    def __post_init__(self):
        if self.replicates < 2:
            raise ValueError("need at least two replicates")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if any(t > self.horizon + 1e-12 for t in self.save_times):
            raise ValueError("save times must not exceed the horizon")

    def model(self) -> IsotropicModel:
        return IsotropicModel(d=self.d, alpha=self.alpha, ell=self.ell)

    def base_set(self) -> geometry.SetDescriptor:
        if self.set_kind == "ball":
            return geometry.Ball(center=tuple(self.set_center), radius=self.set_radius)
        if self.set_kind == "box":
            return geometry.Box(lo=tuple(self.set_lo), hi=tuple(self.set_hi))
        if self.set_kind == "cylinder":
            return geometry.Cylinder(
                center=tuple(self.set_center),
                axis=tuple(self.set_axis),
                half_length=self.set_half_length,
                radius=self.set_radius,
            )
        raise ValueError(f"unknown set kind {self.set_kind!r}")

    def regions(self) -> list:
        out = []
        for kind, value in self.test_regions:
            if kind == "halfspace":
                out.append(regions.HalfSpace(float(value)))
            elif kind == "ball":
                out.append(regions.CenteredBall(float(value)))
            elif kind == "all":
                out.append(regions.AllSpace())
            elif kind == "empty":
                out.append(regions.EmptySet())
            else:
                raise ValueError(f"unknown test region kind {kind!r}")
        return out


def _flatten(prefix: str, obj: Any, out: dict) -> None:
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out)
    else:
        out[prefix] = obj


_FIELD_ALIASES = {
    "model.d": "d",
    "model.alpha": "alpha",
    "model.ell": "ell",
    "run.experiment": "experiment",
    "run.replicates": "replicates",
    "run.dt": "dt",
    "run.horizon": "horizon",
    "run.save_times": "save_times",
    "run.master_seed": "master_seed",
    "run.jitter": "jitter",
    "run.output_dir": "output_dir",
    "run.n_particles": "n_particles",
    "run.n_markers": "n_markers",
    "run.qr_every": "qr_every",
    "run.separations": "separations",
    "run.distance_samples": "distance_samples",
    "set.kind": "set_kind",
    "set.center": "set_center",
    "set.radius": "set_radius",
    "set.lo": "set_lo",
    "set.hi": "set_hi",
    "set.half_length": "set_half_length",
    "set.axis": "set_axis",
    "initial.kind": "initial_kind",
    "initial.scale": "initial_scale",
}


def _parse_scalar(text: str) -> Any:
    """Parse a --set value as a TOML literal, falling back to a string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _assign(cfg_kwargs: dict, key: str, value: Any) -> None:
    name = _FIELD_ALIASES.get(key, key)
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    if name not in names:
        raise KeyError(f"unknown configuration key {key!r}")
    if isinstance(value, list):
        value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    cfg_kwargs[name] = value


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Build a configuration from an optional TOML file plus overrides.

    Overrides are "dotted.key=value" strings; values are TOML literals
    (numbers, booleans, arrays) with a bare-string fallback.
    """
    kwargs: dict[str, Any] = {}
    if path is not None:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        # nested [[regions]] arrays come through as a list of tables
        if "regions" in data:
            kwargs["test_regions"] = tuple(
                (r["kind"], r.get("value", 0.0)) for r in data.pop("regions")
            )
        flat: dict[str, Any] = {}
        _flatten("", data, flat)
        for key, value in flat.items():
            _assign(kwargs, key, value)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, _, text = item.partition("=")
        _assign(kwargs, key.strip(), _parse_scalar(text.strip()))
    return ExperimentConfig(**kwargs)


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Return a copy of cfg with --set style overrides applied."""
    kwargs: dict[str, Any] = {}
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, _, text = item.partition("=")
        _assign(kwargs, key.strip(), _parse_scalar(text.strip()))
    return dataclasses.replace(cfg, **kwargs)
