"""Sectioned ``key = value`` experiment configuration.

Every key has a default (see ``DEFAULTS``); unknown sections or keys are
errors. ``load_config`` returns a TrainConfig, an LmftConfig and any grid
cells (sections named ``cell...``) found in the file.

Example::

    [universe]
    kappa = 32

    [loss]
    name = sphereface2
    lam = 0.7

    [training]
    seed = 3
"""

from __future__ import annotations

import configparser
from dataclasses import replace
from pathlib import Path

from .errors import InvalidConfig
from .model import named_loss
from .train import EvalConfig, LmftConfig, TrainConfig, UniverseConfig

_T = TrainConfig()
_U = UniverseConfig()
_E = EvalConfig()
_L = LmftConfig()

# section -> key -> (default, parser, help)
DEFAULTS = {
    "universe": {
        "k_train": (_U.K_train, int, "training speakers"),
        "k_unseen": (_U.K_unseen, int, "unseen (evaluation) speakers"),
        "d_feat": (_U.d_feat, int, "feature dimension"),
        "kappa": (_U.kappa, float, "within-speaker concentration (noise variance 1/kappa)"),
        "utts_per_speaker": (_U.utts_per_speaker, int, "utterances per speaker"),
    },
    "model": {
        "hidden": (",".join(map(str, _T.hidden)), str, "comma-separated hidden widths"),
        "emb_dim": (_T.emb_dim, int, "embedding dimension"),
    },
    "loss": {
        "name": ("sphereface2", str, "softmax|aam|am|asoftmax|sphereface2[-a|-m]|proto|angproto"),
        "m": (None, float, "margin (AM/AAM/SphereFace2) or angular multiplier (A-softmax)"),
        "s": (None, float, "scale"),
        "lam": (None, float, "SphereFace2 positive/negative balance"),
        "t": (None, float, "SphereFace2 similarity-adjustment exponent"),
        "bias_init": (None, float, "SphereFace2 initial bias"),
    },
    "training": {
        "epochs": (_T.epochs, int, "training epochs"),
        "batch_size": (_T.batch_size, int, "classification batch size"),
        "proto_n": (_T.proto_n, int, "speakers per prototypical batch"),
        "proto_m": (_T.proto_m, int, "utterances per speaker in prototypical batches"),
        "lr_start": (_T.lr_start, float, "initial learning rate"),
        "lr_end": (_T.lr_end, float, "final learning rate (exponential decay)"),
        "momentum": (_T.momentum, float, "SGD momentum"),
        "weight_decay": (_T.weight_decay, float, "SGD weight decay"),
        "seed": (None, int, "random seed (or pass --seed)"),
        "label_noise": (_T.label_noise, float, "proportion of training labels to corrupt"),
    },
    "evaluation": {
        "n_target": (_E.n_target, int, "target trials per set"),
        "n_nontarget": (_E.n_nontarget, int, "non-target trials per set"),
        "hard_set": (_E.hard_set, "bool", "also build the hard (similar-speaker) trial set"),
        "p_target_plain": (_E.p_target_plain, float, "minDCF prior for the plain set"),
        "p_target_hard": (_E.p_target_hard, float, "minDCF prior for the hard set"),
        "asnorm": (_E.asnorm, "bool", "also report A-snorm metrics"),
        "asnorm_top_frac": (_E.asnorm_top_frac, float, "A-snorm top-N as a fraction of the cohort"),
    },
    "lmft": {
        "margin_override": (_L.margin_override, float, "fine-tuning margin"),
        "lr": (_L.lr, float, "constant fine-tuning learning rate"),
        "epochs": (_L.epochs, int, "fine-tuning epochs"),
        "noise_factor": (_L.noise_factor, float, "within-speaker noise multiplier during fine-tuning"),
    },
}
CELL_KEYS = {"lam": float, "t": float, "s": float, "m": float}


def _parse(value: str, kind, where):
    try:
        if kind == "bool":
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise InvalidConfig(f"{where}: cannot parse {value!r}") from None


def parse_config_text(text: str, source: str = "<config>"):
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise InvalidConfig(f"{source}: {e}") from None
    values: dict = {}
    cells = []
    for section in cp.sections():
        if section.startswith("cell"):
            cell = {}
            for key, raw in cp.items(section):
                if key not in CELL_KEYS:
                    raise InvalidConfig(f"{source}: [{section}] unknown key {key!r} (allowed: {sorted(CELL_KEYS)})")
                cell[key] = _parse(raw, CELL_KEYS[key], f"{source} [{section}] {key}")
            cells.append(cell)
            continue
        if section not in DEFAULTS:
            raise InvalidConfig(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in DEFAULTS[section]:
                raise InvalidConfig(f"{source}: [{section}] unknown key {key!r}")
            kind = DEFAULTS[section][key][1]
            values[(section, key)] = _parse(raw, kind, f"{source} [{section}] {key}")
    return values, cells


def build(values: dict, seed: int | None = None):
    """TrainConfig and LmftConfig from parsed values; ``seed`` overrides the file."""

    def get(section, key):
        return values.get((section, key), DEFAULTS[section][key][0])

    if seed is None:
        seed = get("training", "seed")
    if seed is None:
        raise InvalidConfig("a seed is required: pass --seed or set [training] seed")
    loss_kw = {k: get("loss", k) for k in ("m", "s", "lam", "t", "bias_init") if get("loss", k) is not None}
    loss = named_loss(get("loss", "name"), **loss_kw)
    hidden = tuple(int(h) for h in str(get("model", "hidden")).split(",") if h.strip())
    universe = UniverseConfig(
        K_train=get("universe", "k_train"),
        K_unseen=get("universe", "k_unseen"),
        d_feat=get("universe", "d_feat"),
        kappa=get("universe", "kappa"),
        utts_per_speaker=get("universe", "utts_per_speaker"),
    )
    evaluation = EvalConfig(**{k: get("evaluation", k) for k in DEFAULTS["evaluation"]})
    tkeys = [k for k in DEFAULTS["training"] if k != "seed"]
    cfg = TrainConfig(
        loss=loss,
        hidden=hidden,
        emb_dim=get("model", "emb_dim"),
        universe=universe,
        evaluation=evaluation,
        seed=int(seed),
        **{k: get("training", k) for k in tkeys},
    )
    lcfg = LmftConfig(**{k: get("lmft", k) for k in DEFAULTS["lmft"]})
    return cfg, lcfg


def load_config(path=None, seed: int | None = None, overrides: dict | None = None):
    """Returns ``(TrainConfig, LmftConfig, grid_cells)``."""
    if path is None:
        values, cells = {}, []
    else:
        p = Path(path)
        if not p.exists():
            raise InvalidConfig(f"config file not found: {p}")
        values, cells = parse_config_text(p.read_text(encoding="utf-8"), str(p))
    for key, val in (overrides or {}).items():
        values[key] = val
    cfg, lcfg = build(values, seed)
    return cfg, lcfg, cells


def describe_defaults() -> str:
    lines = []
    for section, keys in DEFAULTS.items():
        lines.append(f"[{section}]")
        for key, (default, _, help_) in keys.items():
            lines.append(f"  {key} = {'' if default is None else default}    # {help_}")
    return "\n".join(lines)


def with_loss(cfg: TrainConfig, name: str, **kw) -> TrainConfig:
    return replace(cfg, loss=named_loss(name, **kw))
