"""Configuration file handling and seed derivation.

One JSON file configures the whole pipeline (machine geometry, environment,
Jacobian controller, excitation, PPO). A versioned default ships as package
data; every section can be overridden by a user-supplied file.
"""

import hashlib
import json
from importlib import resources

from .machine import CylinderGeometry, MachineParams

CONFIG_FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


def derive_seed(seed, label):
    """Stable sub-seed for a named consumer of the run seed."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def config_hash(cfg):
    """Short content hash of a config dict, for run manifests."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def default_config():
    text = resources.files("hydroarm.data").joinpath("default_config.json").read_text()
    return json.loads(text)


def load_config(path=None):
    """Load a config file, or the packaged default when path is None."""
    if path is None:
        cfg = default_config()
    else:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    version = cfg.get("format_version")
    if version != CONFIG_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported config format_version {version!r} "
            f"(expected {CONFIG_FORMAT_VERSION})"
        )
    return cfg


def machine_from_config(cfg):
    """Build MachineParams from the 'machine' section of a config dict."""
    try:
        m = cfg["machine"]
        cylinders = tuple(
            CylinderGeometry(c["a"], c["b"], c["phi"]) for c in m["cylinders"]
        )
        return MachineParams(
            base_height=m["base_height"],
            link_lengths=m["link_lengths"],
            q2_fixed_angle=m["q2_fixed_angle"],
            joint_limits=m["joint_limits"],
            cylinders=cylinders,
            direction_gains=m["direction_gains"],
            dead_zone=m["dead_zone"],
            duty_cap=m["duty_cap"],
            tau_rest=m["tau_rest"],
            tau_move=m["tau_move"],
            rest_speed_threshold=m.get("rest_speed_threshold", 0.02),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad machine config: {exc}") from exc


def default_machine_params():
    return machine_from_config(default_config())
