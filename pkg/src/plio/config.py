"""Run configuration: one flat key = value namespace.

The config file format is plain text, one `key = value` per line, `#` starts
a comment; vectors are space-separated numbers.  Unknown keys are rejected so
typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import DatasetError


def _vec3(x, y, z):
    return lambda: np.array([x, y, z])


@dataclass
class RunConfig:
    # sliding window
    window_size: int = 10
    t_d: float = 0.0

    # static initialization and the anchoring prior of the first node; the
    # roll/pitch sigma reflects leveling accuracy (accel-bias tilt), while
    # position and yaw are tight gauge anchors
    init_duration: float = 1.0
    init_max_gyro_std: float = 0.05
    init_pos_sigma: float = 1e-4
    init_rollpitch_sigma: float = 5e-3
    init_yaw_sigma: float = 1e-6
    init_vel_sigma: float = 0.01
    init_bg_sigma: float = 1e-3
    init_ba_sigma: float = 0.05
    extr_pos_sigma: float = 0.05
    extr_rot_sigma: float = 0.1
    # extrinsic dims stay frozen for this many keyframes: during bootstrap the
    # optimizer would otherwise fold INS drift into the extrinsic rotation
    calibrate_extrinsics_after: int = 6

    # IMU noise model used for preintegration covariances
    gravity: float = 9.81
    gyro_noise_density: float = 2.4e-4
    accel_noise_density: float = 1.7e-3
    gyro_bias_walk: float = 1.0e-5
    accel_bias_walk: float = 1.0e-4

    # keyframing and mapping; during bootstrap keyframes come at the denser
    # interval so enough of them exist for plane-point constraints before the
    # open-loop bias drift grows
    keyframe_translation: float = 0.3
    keyframe_rotation_deg: float = 10.0
    keyframe_interval: float = 1.0
    bootstrap_interval: float = 0.3
    voxel_size: float = 0.1

    # association
    max_neighbor_radius: float = 1.0
    sigma_eps_f2f: float = 0.05
    thickness_cap: float = 0.0025
    selection_index: int = 0
    variance_floor: float = 1e-8
    covariance_mode: str = "adaptive"  # adaptive | fixed
    fixed_sigma_eps: float = 0.05
    max_source_points: int = 600
    max_ba_factors: int = 400
    normal_consistency_deg: float = 20.0
    cull_sigma_floor: float = 0.03

    # optimizer
    huber_delta: float = 1.345
    chi1d_threshold: float = 3.0
    max_iterations: int = 30
    step1_iterations: int = 5
    lambda_init: float = 1e-6
    lambda_max: float = 1e12
    cost_tol: float = 1e-8
    step_tol: float = 1e-10
    marg_regularizer: float = 1e-8
    jacobian_mode: str = "frozen"  # frozen | full

    # LiDAR-IMU extrinsics initial guess (translation m, rotation vector rad)
    extrinsic_translation: np.ndarray = field(default_factory=_vec3(0.0, 0.0, 0.0))
    extrinsic_rotvec: np.ndarray = field(default_factory=_vec3(0.0, 0.0, 0.0))

    def validate(self) -> "RunConfig":
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if self.covariance_mode not in ("adaptive", "fixed"):
            raise ValueError(f"covariance_mode {self.covariance_mode!r}")
        if self.jacobian_mode not in ("frozen", "full"):
            raise ValueError(f"jacobian_mode {self.jacobian_mode!r}")
        return self


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    by_name = {f.name: f for f in fields(RunConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in by_name:
            raise DatasetError(f"config line {lineno}: unknown key {key!r}")
        f = by_name[key]
        current = getattr(cfg, key)
        try:
            if isinstance(current, np.ndarray):
                parsed = np.array([float(v) for v in value.split()])
                if parsed.shape != current.shape:
                    raise ValueError(f"expected {current.shape[0]} numbers")
            elif f.type == "int" or isinstance(current, int):
                parsed = int(value)
            elif f.type == "float" or isinstance(current, float):
                parsed = float(value)
            else:
                parsed = value
        except ValueError as e:
            raise DatasetError(f"config line {lineno}: bad value for {key}: {e}") from None
        setattr(cfg, key, parsed)
    return cfg.validate()


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DatasetError(f"cannot read config {path}: {e}") from None
    return parse_config(text, base)
