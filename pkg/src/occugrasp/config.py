"""Run configuration: documented key set, config-file parsing, CLI overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields


@dataclass
class RunConfig:
    # reproducibility
    seed: int = 0
    # tri-plane / feature widths (paper defaults; profiles shrink them)
    k_groups: int = 3
    plane_h: int = 64
    plane_w: int = 64
    c_p: int = 256
    c_t: int = 128
    c_q: int = 512
    # grasp region geometry
    voxel_size: float = 0.01
    gripper_radius: float = 0.05
    d_min: float = -0.01
    d_max: float = 0.04
    region_budget: int = 2_000_000
    # heads
    v_dirs: int = 60
    key_k: int = 32
    sa_widths: tuple = (64, 128, 256, 512)
    # training
    lr: float = 0.001
    steps: int = 2000
    batch_size: int = 2
    n_points: int = 20000
    n_candidates: int = 1024
    train_candidates: int = 8
    occ_samples: int = 15000
    report_every: int = 100
    explore_frac: float = 0.5  # training-time chance to decode at a label-positive direction
    # input augmentation / views
    noise_sigma: float = 0.0
    noise_frac: float = 0.0
    views: int = 1
    # dataset labelling
    label_points: int = 1024
    pool_size: int = 32
    # ablation switches
    use_occupancy: bool = True
    use_density: bool = True
    use_local_context: bool = True
    use_global_context: bool = True
    use_refinement: bool = True
    implicit_mode: str = "maxpool"  # maxpool | set_abstraction | none

    def __post_init__(self):
        if isinstance(self.sa_widths, list):
            self.sa_widths = tuple(self.sa_widths)
        if self.implicit_mode not in ("maxpool", "set_abstraction", "none"):
            raise ValueError(f"unknown implicit_mode {self.implicit_mode!r}")
        if not (self.use_local_context or self.use_global_context):
            raise ValueError("at least one of local/global context must stay enabled")

    # architecture-derived widths
    @property
    def pe_width(self) -> int:
        return max(4, self.c_q // 4)

    @property
    def f_g_width(self) -> int:
        if self.use_local_context and self.use_global_context:
            w = self.c_q - self.c_p - self.pe_width
            if w <= 0:
                raise ValueError("c_q too small for c_p + position-embedding width")
            return w
        return self.c_q

    @property
    def f_pq_width(self) -> int:
        if self.use_global_context and self.use_local_context:
            return self.c_q
        if self.use_global_context:
            return self.f_g_width
        return self.c_p + self.pe_width


_BOOL_KEYS = {"use_occupancy", "use_density", "use_local_context", "use_global_context", "use_refinement"}
_VALID_KEYS = {f.name for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _BOOL_KEYS:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"bad boolean for {key}: {raw!r}")
    if key == "implicit_mode":
        return raw
    if key == "sa_widths":
        return tuple(int(v) for v in raw.split(","))
    ref = RunConfig.__dataclass_fields__[key].default
    return type(ref)(float(raw)) if isinstance(ref, float) else int(raw) if isinstance(ref, int) else raw


def _parse_text_values(text: str) -> dict:
    """Parse ``key = value`` lines to a value dict; unknown keys are fatal."""
    values = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _VALID_KEYS:
            raise ValueError(f"config line {ln}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def parse_config_text(text: str, on_default=None) -> RunConfig:
    values = _parse_text_values(text)
    cfg = RunConfig(**values)
    if on_default is not None:
        for f in fields(RunConfig):
            if f.name not in values:
                on_default(f.name, getattr(cfg, f.name))
    return cfg


def _replace(cfg: RunConfig, values: dict) -> RunConfig:
    merged = {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}
    merged.update(values)
    return RunConfig(**merged)


def load_config(path=None, overrides: dict | None = None, on_default=None) -> RunConfig:
    """Config file then CLI overrides (flags win); OCCUGRASP_SEED as seed fallback."""
    text = ""
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    values = _parse_text_values(text)
    explicit = set(values)
    overrides = dict(overrides or {})
    for key in overrides:
        if key not in _VALID_KEYS:
            raise ValueError(f"unknown config key {key!r}")
    values.update(overrides)
    explicit |= set(overrides)
    if "seed" not in explicit and "OCCUGRASP_SEED" in os.environ:
        values["seed"] = int(os.environ["OCCUGRASP_SEED"])
        explicit.add("seed")
    cfg = RunConfig(**values)
    if on_default is not None:
        for f in fields(RunConfig):
            if f.name not in explicit:
                on_default(f.name, getattr(cfg, f.name))
    return cfg


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if f.name == "sa_widths":
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
