"""Flat ``section.key = value`` configuration files and experiment config."""

from __future__ import annotations

from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


def parse_kv_text(text: str) -> dict:
    """Parse flat key-value lines; '#' starts a comment, blank lines skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_kv_file(path) -> dict:
    with open(path) as f:
        return parse_kv_text(f.read())


@dataclass
class ExperimentConfig:
    """Everything one racing experiment needs, loadable from a config file."""
    mode: str = "pixelmpc"              # nominal | pixelmpc
    state_source: str = "truth"         # truth | particle_filter
    laps: int = 10
    master_seed: int = 0
    max_time: float = 60.0
    course_path: str = ""               # empty -> built-in desk course
    weights_path: str = ""
    dataset_path: str = ""
    target_mode: str = "polar"          # flow regression targets: polar | cartesian
    # vehicle
    mass: float = 1.0
    drag_coeff: float = 0.1
    plant_noise_std: float = 0.0        # w_f std in the plant simulator [N]
    # camera
    hfov: float = 1.5707963267948966
    vfov: float = 1.1780972450961724
    image_width: int = 204
    image_height: int = 153
    cam_pitch: float = 0.0
    detector_noise_std: float = 0.0     # normalized px
    # cost
    c1: float = 400.0
    c2: float = 250.0
    c3: float = 8.0
    c_pixel: float = 9.0e6
    t_f_pixel: float = 1.0
    desired_speed: float = 14.0
    # mppi
    horizon: int = 80
    samples: int = 512
    iterations: int = 1
    dt: float = 0.025
    temperature: float = 1.0
    sigma: tuple = (0.2, 0.2, 0.3, 2.2)
    omega_max: float = 3.0
    # collection / training
    collect_laps: int = 10
    collect_speeds: tuple = (6.0, 8.0, 10.0, 12.0, 14.0)
    pixels_per_frame: int = 100
    epochs: int = 40
    batch_size: int = 512
    learning_rate: float = 1e-3
    dropout: float = 0.10
    holdout_laps: int = 2
    # particle filter
    pf_particles: int = 6400
    pf_pos_noise: float = 0.2
    pf_accel_noise: float = 0.2
    pf_rate_noise: float = 0.1
    pf_meas_std_px: float = 8.0
    pf_ess_fraction: float = 0.5

    extra: dict = field(default_factory=dict)


_FIELD_KEYS = {
    "run.mode": ("mode", str),
    "run.state_source": ("state_source", str),
    "run.laps": ("laps", int),
    "run.seed": ("master_seed", int),
    "run.max_time": ("max_time", float),
    "run.course": ("course_path", str),
    "run.weights": ("weights_path", str),
    "run.dataset": ("dataset_path", str),
    "run.target_mode": ("target_mode", str),
    "vehicle.mass": ("mass", float),
    "vehicle.drag_coeff": ("drag_coeff", float),
    "vehicle.plant_noise_std": ("plant_noise_std", float),
    "camera.hfov": ("hfov", float),
    "camera.vfov": ("vfov", float),
    "camera.width": ("image_width", int),
    "camera.height": ("image_height", int),
    "camera.pitch": ("cam_pitch", float),
    "camera.detector_noise_std": ("detector_noise_std", float),
    "cost.c1": ("c1", float),
    "cost.c2": ("c2", float),
    "cost.c3": ("c3", float),
    "cost.c_pixel": ("c_pixel", float),
    "cost.t_f_pixel": ("t_f_pixel", float),
    "cost.desired_speed": ("desired_speed", float),
    "mppi.horizon": ("horizon", int),
    "mppi.samples": ("samples", int),
    "mppi.iterations": ("iterations", int),
    "mppi.dt": ("dt", float),
    "mppi.temperature": ("temperature", float),
    "mppi.omega_max": ("omega_max", float),
    "collect.laps": ("collect_laps", int),
    "collect.pixels_per_frame": ("pixels_per_frame", int),
    "train.epochs": ("epochs", int),
    "train.batch_size": ("batch_size", int),
    "train.learning_rate": ("learning_rate", float),
    "train.dropout": ("dropout", float),
    "train.holdout_laps": ("holdout_laps", int),
    "filter.particles": ("pf_particles", int),
    "filter.pos_noise": ("pf_pos_noise", float),
    "filter.accel_noise": ("pf_accel_noise", float),
    "filter.rate_noise": ("pf_rate_noise", float),
    "filter.meas_std_px": ("pf_meas_std_px", float),
    "filter.ess_fraction": ("pf_ess_fraction", float),
}


def load_experiment_config(path) -> ExperimentConfig:
    kv = parse_kv_file(path)
    cfg = ExperimentConfig()
    for key, value in kv.items():
        if key == "mppi.sigma":
            cfg.sigma = tuple(float(x) for x in value.split())
            if len(cfg.sigma) != 4:
                raise ConfigError("mppi.sigma needs 4 values")
        elif key == "collect.speeds":
            cfg.collect_speeds = tuple(float(x) for x in value.split())
        elif key in _FIELD_KEYS:
            name, conv = _FIELD_KEYS[key]
            try:
                setattr(cfg, name, conv(value))
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        else:
            cfg.extra[key] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig):
    if cfg.mode not in ("nominal", "pixelmpc"):
        raise ConfigError(f"unknown mode {cfg.mode!r}")
    if cfg.state_source not in ("truth", "particle_filter"):
        raise ConfigError(f"unknown state source {cfg.state_source!r}")
    if cfg.target_mode not in ("polar", "cartesian"):
        raise ConfigError(f"unknown target mode {cfg.target_mode!r}")
    if cfg.laps < 0 or cfg.horizon < 1 or cfg.samples < 1 or cfg.iterations < 1:
        raise ConfigError("laps must be >= 0; horizon/samples/iterations >= 1")
    if cfg.dt <= 0 or cfg.mass <= 0:
        raise ConfigError("dt and mass must be positive")


def save_experiment_config(cfg: ExperimentConfig, path):
    inv = {name: key for key, (name, _) in _FIELD_KEYS.items()}
    lines = []
    for name, key in sorted(inv.items(), key=lambda kv: kv[1]):
        lines.append(f"{key} = {getattr(cfg, name)}")
    lines.append("mppi.sigma = " + " ".join(str(s) for s in cfg.sigma))
    lines.append("collect.speeds = " + " ".join(str(s) for s in cfg.collect_speeds))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
