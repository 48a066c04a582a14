"""Plain-text ``key=value`` run configuration.

Keys use the same names as the ``rocksr train`` flags (dashes become
underscores), so a ``config.txt`` written by a run can be passed back with
``--config`` to reproduce it. Blank lines and ``#`` comments are ignored.
"""
from __future__ import annotations

from .models import ModelSpec
from .trainer import TrainConfig

# key -> (type, ModelSpec field or None, TrainConfig field or None)
RUN_KEYS = {
    "model": (str, "family", None),
    "blocks": (int, "num_residual_blocks", None),
    "filters": (int, "base_filters", None),
    "scale": (int, "scale", None),
    "channels": (int, "channels", None),
    "final_kernel": (int, "final_kernel", None),
    "expansion": (int, "expansion", None),
    "linear_ratio": (float, "linear_ratio", None),
    "prelu_init": (float, "prelu_init", None),
    "lr": (float, None, "lr_init"),
    "step": (float, None, "step"),
    "iterations": (int, None, "iterations_per_epoch"),
    "batch": (int, None, "batch"),
    "crop": (int, None, "lr_crop"),
    "epochs": (int, None, "epochs"),
    "seed": (int, None, "seed"),
    "augment": (bool, None, "augment"),
    "blur_min": (float, None, None),
    "blur_max": (float, None, None),
    "noise_var_min": (float, None, None),
    "noise_var_max": (float, None, None),
    "subset": (str, None, "subset"),
    "dtype": (str, None, "dtype"),
}


class ConfigError(ValueError):
    pass


def _coerce(key, value, typ):
    if value is None or isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    if text.lower() in ("none", ""):
        return None
    try:
        if typ is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return typ(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {value!r} as {typ.__name__}") from None


def parse_kv(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def load_kv(path):
    with open(path) as fh:
        return parse_kv(fh.read(), source=str(path))


def dump_kv(d):
    return "".join(f"{k}={'none' if v is None else v}\n" for k, v in d.items())


def run_kv(spec, config):
    spec = spec.resolved()
    d = {}
    for key, (_, sfield, cfield) in RUN_KEYS.items():
        if sfield:
            d[key] = getattr(spec, sfield)
        elif cfield:
            d[key] = getattr(config, cfield)
    d["blur_min"], d["blur_max"] = config.blur_sigma_range
    d["noise_var_min"], d["noise_var_max"] = config.noise_variance_range
    return d


def write_run_config(path, spec, config):
    with open(path, "w") as fh:
        fh.write(dump_kv(run_kv(spec, config)))


def build_run(d):
    """``(ModelSpec, TrainConfig)`` from a key=value mapping; unknown keys raise."""
    unknown = set(d) - set(RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
    vals = {k: _coerce(k, v, RUN_KEYS[k][0]) for k, v in d.items()}
    spec_kw = {RUN_KEYS[k][1]: v for k, v in vals.items() if RUN_KEYS[k][1] and v is not None}
    if "family" not in spec_kw:
        raise ConfigError("model is required")
    cfg_kw = {RUN_KEYS[k][2]: v for k, v in vals.items() if RUN_KEYS[k][2] and v is not None}
    blur = (vals.get("blur_min") or 0.0, 1.0 if vals.get("blur_max") is None else vals["blur_max"])
    noise = (vals.get("noise_var_min") or 0.0,
             0.005 if vals.get("noise_var_max") is None else vals["noise_var_max"])
    spec = ModelSpec(**spec_kw).resolved()
    config = TrainConfig(blur_sigma_range=blur, noise_variance_range=noise, **cfg_kw)
    return spec, config
