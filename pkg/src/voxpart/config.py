"""Declared-key run configuration.

Values merge with precedence defaults < config file < environment < flags.
The config file is line-oriented key=value with dotted section keys; the
environment supplies per-key overrides as VOXPART_<SECTION>_<NAME> and
VOXPART_CONFIG as a config-path fallback.  Every consumed key must be
declared below — unknown keys are an error, which catches typos early.
"""

import os

from .errors import DataError


def _ints(raw):
    return tuple(int(p) for p in str(raw).split(","))


# key -> (parser, default)
DECLARED = {
    "data.objects": (int, 8),
    "data.test_objects": (int, 2),
    "data.views": (int, 40),
    "data.test_views": (int, 10),
    "data.image_size": (int, 64),
    "fit.extents": (int, 24),
    "fit.iterations": (int, 1200),
    "fit.rays_per_step": (int, 1024),
    "fit.samples_per_ray": (int, 0),     # 0 = 1.5x the grid extent
    "fit.lr": (float, 0.1),
    "fit.tv": (float, 1e-5),
    "fit.sparsity": (float, 1e-4),
    "ae.widths": (_ints, (16, 32, 48)),
    "ae.iterations": (int, 800),
    "ae.lr": (float, 2e-3),
    "ae.beta": (float, 1e-4),
    "train.iterations": (int, 2000),
    "train.warmup": (int, 200),
    "train.rays_per_step": (int, 512),
    "train.samples_per_ray": (int, 32),
    "train.lr_unet": (float, 1e-3),
    "train.lr_decoder": (float, 1e-3),
    "train.tv": (float, 1e-5),
    "train.checkpoint_every": (int, 500),
    "train.snapshot_every": (int, 500),
    "diffusion.steps": (int, 50),
    "diffusion.t_min": (float, 1e-3),
    "diffusion.guidance_scale": (float, 1.0),
    "unet.base_width": (int, 16),
    "unet.mults": (_ints, (1, 2, 4)),
    "unet.time_dim": (int, 32),
    "decoder.k_parts": (int, 4),
    "decoder.d_model": (int, 32),
    "decoder.heads": (int, 4),
    "decoder.sa_window": (int, 6),
    "decoder.head_hidden": (int, 32),
    "sample.views": (int, 8),
    "sample.ray_samples": (int, 48),
    "eval.points": (int, 512),
    "eval.tau": (float, 0.0),            # 0 = opacity-derived default
}

ENV_PREFIX = "VOXPART_"
ENV_CONFIG = "VOXPART_CONFIG"


def parse_value(key, raw):
    if key not in DECLARED:
        raise DataError(f"unknown config key: {key}")
    parser, _ = DECLARED[key]
    try:
        return parser(raw)
    except (TypeError, ValueError) as e:
        raise DataError(f"invalid value for {key}: {raw!r}") from e


def parse_file(path):
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    values = {}
    for ln, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{ln}: expected key=value")
        key, raw = line.split("=", 1)
        values[key.strip()] = parse_value(key.strip(), raw.strip())
    return values


def _env_key(name):
    # VOXPART_TRAIN_RAYS_PER_STEP -> train.rays_per_step
    body = name[len(ENV_PREFIX):].lower()
    section, _, rest = body.partition("_")
    return f"{section}.{rest}"


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    values = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX) or name == ENV_CONFIG:
            continue
        key = _env_key(name)
        if key not in DECLARED:
            raise DataError(f"unknown config key in environment: {name}")
        values[key] = parse_value(key, raw)
    return values


class RunConfig:
    """Fully merged, typed configuration."""

    def __init__(self, values):
        self.values = values

    def __getitem__(self, key):
        if key not in DECLARED:
            raise DataError(f"unknown config key: {key}")
        return self.values[key]

    def section(self, prefix):
        return {k.split(".", 1)[1]: v for k, v in self.values.items()
                if k.startswith(prefix + ".")}


def build(config_path=None, flags=None, environ=None):
    """Merge all layers into a RunConfig.

    flags: {key: raw value or None}; None entries are treated as unset.
    """
    environ = os.environ if environ is None else environ
    values = {k: default for k, (_, default) in DECLARED.items()}
    path = config_path or environ.get(ENV_CONFIG)
    if path:
        values.update(parse_file(path))
    values.update(env_overrides(environ))
    for key, raw in (flags or {}).items():
        if raw is None:
            continue
        values[key] = parse_value(key, raw)
    return RunConfig(values)
