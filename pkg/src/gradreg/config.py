"""YAML configuration for ``gradreg register``.

Every key is optional; anything unspecified takes the dataclass default.
Unknown keys are rejected so a typo never silently falls back to a default.
See ``EXAMPLE_CONFIG`` for the complete annotated layout.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import yaml

from gradreg.fadam import FAdamConfig
from gradreg.registration import DEFAULT_LR, RegistrationConfig
from gradreg.similarity import LossConfig

EXAMPLE_CONFIG = """\
# pyramid depth; each level halves the grid (block averaging)
levels: 3
# iterations per level, coarse to fine; length must equal `levels`
iters_per_level: [100, 100, 50]
# stop a level when the best loss improved by less than this (relative) ...
converge_tol: 1.0e-5
# ... over this many recorded iterations
patience: 10
# recorded for provenance; the optimizer itself is deterministic
seed: 0

loss:
  gamma: 0.5          # weight of the gradient-correlation loss
  lambda: 2.0         # weight of the diffusion regularizer
  lncc_window: 9      # odd cube edge (voxels) of the local correlation window
  eps: 1.0e-5         # variance floor in every correlation denominator
  use_ic: true        # local intensity correlation term
  use_gc: true        # gradient correlation term
  use_reg: true       # diffusion regularizer

optim:
  lr: 3.0e-2          # voxels per step; halve it when warm-starting with --init-field
  beta1: 0.9
  beta2: 0.999
  eps: 1.0e-8
  rho: 0.5            # exponent on the Fisher (second-moment) estimate
  clip: 1.0           # RMS clip on the preconditioned gradient
  weight_decay: 0.0
"""


class ConfigError(ValueError):
    pass


_TOP_KEYS = {"levels", "iters_per_level", "converge_tol", "patience", "seed", "loss", "optim"}
_LOSS_KEYS = {"gamma", "lambda", "lncc_window", "eps", "use_ic", "use_gc", "use_reg"}
_OPTIM_KEYS = set(FAdamConfig.__dataclass_fields__)


def _reject_unknown(section: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key {where + unknown[0]!r}")


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    return sec


def config_from_dict(doc: dict[str, Any] | None) -> RegistrationConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    _reject_unknown(doc, _TOP_KEYS, "")
    loss_doc = _section(doc, "loss")
    optim_doc = _section(doc, "optim")
    _reject_unknown(loss_doc, _LOSS_KEYS, "loss.")
    _reject_unknown(optim_doc, _OPTIM_KEYS, "optim.")

    loss_kw = dict(loss_doc)
    if "lambda" in loss_kw:
        loss_kw["lam"] = loss_kw.pop("lambda")
    top = {k: v for k, v in doc.items() if k not in ("loss", "optim")}
    if "iters_per_level" in top and not isinstance(top["iters_per_level"], (list, tuple)):
        raise ConfigError("iters_per_level must be a list")
    optim_kw = {"lr": DEFAULT_LR, **optim_doc}
    try:
        return RegistrationConfig(loss=LossConfig(**loss_kw), optim=FAdamConfig(**optim_kw), **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RegistrationConfig:
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return config_from_dict(doc)
