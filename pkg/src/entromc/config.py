"""Experiment configuration: INI files with typed, strictly-validated keys.

Presets ship inside the package (one file per benchmark row, plus reduced
"-desk" variants sized for a workstation); any key can be overridden with
section.key=value strings. A config resolves to the target, the trainer
config, and the evaluation/baseline settings, and can be dumped back out as
the canonical snapshot stored in every run directory.
"""

import configparser
import io
import os
from importlib import resources

import numpy as np

from . import targets as targets_mod
from .training import TrainConfig

_BOOL = {"true": True, "yes": True, "1": True,
         "false": False, "no": False, "0": False}


def _parse_bool(s):
    try:
        return _BOOL[s.strip().lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {s!r}") from None


def _parse_step_size(s):
    s = s.strip()
    if s in ("auto", "neck"):
        return s
    return float(s)


# section -> key -> (parser, default); None default means "no entry unless
# the file or an override provides one"
SCHEMA = {
    "target": {
        "name": (str, None),
        "dim": (int, None),
        "log10_min": (float, -2.0),
        "log10_max": (float, 2.0),
        "sigma": (float, 3.0),
        "dataset": (str, None),
        "prior_variance": (float, 100.0),
    },
    "sampler": {
        "mode": (str, "full"),
        "n_steps": (int, 1),
        "width": (int, 256),
        "eps": (float, 0.1),
        "target_accept": (float, 0.9),
        "stop_grad": (_parse_bool, False),
        "squash": (float, 6.0),
    },
    "training": {
        "batch": (int, 8192),
        "iterations": (int, 5000),
        "lr_max": (float, 1e-3),
        "lr_min": (float, 1e-5),
        "buffer": (int, None),
        "checkpoint_every": (int, 0),
    },
    "baseline": {
        "kernel": (str, "mala"),
        "step_size": (_parse_step_size, "auto"),
        "n_leapfrog": (int, 5),
        "target_accept": (float, None),
        "tune_steps": (int, 2000),
        "steps": (int, None),
        "keep": (int, None),
    },
    "eval": {
        "steps": (int, 2000),
        "keep": (int, 1000),
        "chains": (int, 16),
        "bias_steps": (int, 0),
        "bias_chains": (int, 32),
    },
    "run": {
        "seed": (int, 0),
        "out": (str, None),
    },
}

MODE_CHOICES = ("full", "no-grad", "langevin")
KERNEL_CHOICES = ("rwm", "mala", "hmc")
TARGET_CHOICES = ("icg", "scg", "funnel", "blr")

# canonical no-tuning accept-rate targets used when a baseline adapts its
# step size and the config does not pin one
KERNEL_ACCEPT_DEFAULTS = {"rwm": 0.234, "mala": 0.574, "hmc": 0.65}


class ExperimentConfig:
    """Typed section/key table; every key is schema-checked."""

    def __init__(self, sections=None):
        self.sections = {s: dict(keys) for s, keys in (sections or {}).items()}

    def set(self, section, key, raw):
        if section not in SCHEMA:
            raise ValueError(f"unknown config section {section!r}")
        if key not in SCHEMA[section]:
            raise ValueError(f"unknown config key {section}.{key}")
        parser = SCHEMA[section][key][0]
        value = raw if not isinstance(raw, str) else parser(raw)
        self.sections.setdefault(section, {})[key] = value

    def get(self, section, key):
        if key in self.sections.get(section, {}):
            return self.sections[section][key]
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ValueError(f"unknown config key {section}.{key}")
        return SCHEMA[section][key][1]

    def require(self, section, key):
        v = self.get(section, key)
        if v is None:
            raise ValueError(f"config key {section}.{key} is required here")
        return v

    def resolved_ini(self):
        """Canonical dump: every schema key with its effective value."""
        out = io.StringIO()
        for section in SCHEMA:
            keys = [k for k in SCHEMA[section]
                    if self.get(section, k) is not None]
            if not keys:
                continue
            out.write(f"[{section}]\n")
            for k in keys:
                v = self.get(section, k)
                if isinstance(v, bool):
                    v = "true" if v else "false"
                out.write(f"{k} = {v}\n")
            out.write("\n")
        return out.getvalue()

    def validate(self):
        name = self.require("target", "name")
        if name not in TARGET_CHOICES:
            raise ValueError(f"target.name must be one of {TARGET_CHOICES}")
        if name in ("icg", "funnel"):
            self.require("target", "dim")
        if name == "blr":
            self.require("target", "dataset")
        if self.get("sampler", "mode") not in MODE_CHOICES:
            raise ValueError(f"sampler.mode must be one of {MODE_CHOICES}")
        if self.get("baseline", "kernel") not in KERNEL_CHOICES:
            raise ValueError(
                f"baseline.kernel must be one of {KERNEL_CHOICES}")
        if self.get("eval", "keep") >= self.get("eval", "steps"):
            raise ValueError("eval.keep must be smaller than eval.steps")
        return self


def _preset_root():
    return resources.files("entromc") / "presets"


def list_presets():
    return sorted(p.name[:-4] for p in _preset_root().iterdir()
                  if p.name.endswith(".ini"))


def load_config(preset=None, path=None, overrides=()):
    """Build a config from a preset name and/or an INI file, then apply
    section.key=value override strings (later wins)."""
    cfg = ExperimentConfig()
    texts = []
    if preset is not None:
        entry = _preset_root() / f"{preset}.ini"
        if not entry.is_file():
            raise ValueError(
                f"unknown preset {preset!r}; available: "
                f"{', '.join(list_presets())}")
        texts.append(entry.read_text())
    if path is not None:
        with open(path) as fh:
            texts.append(fh.read())
    if not texts and not overrides:
        raise ValueError("need a preset, a config file, or overrides")
    for text in texts:
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(text)
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not section.key=value")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ValueError(f"override {item!r} is not section.key=value")
        section, key = dotted.split(".", 1)
        cfg.set(section.strip(), key.strip(), raw.strip())
    return cfg.validate()


def build_target(cfg, data_dir="data"):
    name = cfg.require("target", "name")
    if name == "icg":
        return targets_mod.make_icg(cfg.require("target", "dim"),
                                    cfg.get("target", "log10_min"),
                                    cfg.get("target", "log10_max"))
    if name == "scg":
        return targets_mod.make_scg()
    if name == "funnel":
        return targets_mod.make_funnel(cfg.require("target", "dim"),
                                       cfg.get("target", "sigma"))
    dataset = cfg.require("target", "dataset")
    # benchmark name resolves to the real data if present, else the bundled
    # synthetic stand-in
    candidates = [dataset,
                  os.path.join(data_dir, f"{dataset}.csv"),
                  os.path.join(data_dir, f"{dataset}_synth.csv")]
    path = next((p for p in candidates if os.path.exists(p)), candidates[1])
    table = targets_mod.load_dataset_csv(path)
    return targets_mod.make_blr(table, cfg.get("target", "prior_variance"))


def build_train_config(cfg):
    return TrainConfig(
        n_steps=cfg.get("sampler", "n_steps"),
        width=cfg.get("sampler", "width"),
        eps=cfg.get("sampler", "eps"),
        batch_size=cfg.get("training", "batch"),
        iterations=cfg.get("training", "iterations"),
        lr_max=cfg.get("training", "lr_max"),
        lr_min=cfg.get("training", "lr_min"),
        target_accept=cfg.get("sampler", "target_accept"),
        mode=cfg.get("sampler", "mode"),
        stop_grad=cfg.get("sampler", "stop_grad"),
        squash_lambda=cfg.get("sampler", "squash"),
        buffer_size=cfg.get("training", "buffer"),
        seed=cfg.get("run", "seed"),
        checkpoint_every=cfg.get("training", "checkpoint_every"),
    )


def baseline_accept_target(cfg):
    pinned = cfg.get("baseline", "target_accept")
    if pinned is not None:
        return pinned
    return KERNEL_ACCEPT_DEFAULTS[cfg.get("baseline", "kernel")]
