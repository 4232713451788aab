"""Training recipe, large-margin fine-tuning and the experiment drivers."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import evaluation as E
from .core import Rng
from .data import (
    SpeakerUniverse,
    batch_sampler_classification,
    batch_sampler_proto,
    gen_universe,
    inject_label_noise,
    make_trials,
)
from .errors import Diverged, InvalidConfig, NonFinite
from .losses import base_margin
from .model import Checkpoint, LossConfig, Model, SgdState, apply_gradients, loss_and_grads, loss_from_dict, loss_to_dict, named_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class UniverseConfig:
    K_train: int = 200
    K_unseen: int = 50
    d_feat: int = 32
    kappa: float = 32.0
    utts_per_speaker: int = 30


@dataclass(frozen=True)
class EvalConfig:
    n_target: int = 2000
    n_nontarget: int = 2000
    hard_set: bool = True
    p_target_plain: float = 0.01
    p_target_hard: float = 0.05
    asnorm: bool = True
    asnorm_top_frac: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=lambda: named_loss("sphereface2"))
    epochs: int = 40
    batch_size: int = 64
    proto_n: int = 16
    proto_m: int = 3
    lr_start: float = 0.05
    lr_end: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    hidden: tuple = (32,)
    emb_dim: int = 16
    label_noise: float = 0.0
    universe: UniverseConfig = field(default_factory=UniverseConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if not self.lr_start >= self.lr_end >= 0 or self.lr_start < 0:
            raise InvalidConfig("need lr_start >= lr_end >= 0")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = loss_to_dict(self.loss)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d.pop("lmft", None)
        d["loss"] = loss_from_dict(d["loss"])
        d["hidden"] = tuple(d["hidden"])
        d["universe"] = UniverseConfig(**d["universe"])
        d["evaluation"] = EvalConfig(**d["evaluation"])
        return cls(**d)


@dataclass(frozen=True)
class LmftConfig:
    margin_override: float = 0.35
    lr: float = 1e-4
    epochs: int = 5
    noise_factor: float = 0.5


@dataclass
class RunRecord:
    config: dict
    epoch_losses: list
    metrics: dict
    checkpoint: Checkpoint | None = None
    diverged: str | None = None

    def to_text(self) -> str:
        """Line-oriented ``key = value`` report; floats use repr for exactness."""
        lines = []

        def emit(prefix, obj):
            if isinstance(obj, dict):
                for k in obj:
                    emit(f"{prefix}.{k}" if prefix else str(k), obj[k])
            elif isinstance(obj, (list, tuple)):
                lines.append(f"{prefix} = {' '.join(_fmt(v) for v in obj)}")
            else:
                lines.append(f"{prefix} = {_fmt(obj)}")

        emit("config", self.config)
        for e, v in enumerate(self.epoch_losses):
            lines.append(f"epoch.{e}.mean_loss = {_fmt(v)}")
        emit("metric", self.metrics)
        lines.append(f"diverged = {self.diverged or 'no'}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


def lr_at(e: int, total: int, lr_start: float, lr_end: float) -> float:
    """Exponential decay from lr_start at epoch 0 to lr_end at the last epoch."""
    if total < 1 or not 0 <= e < total:
        raise InvalidConfig(f"epoch {e} outside [0, {total})")
    if lr_start < lr_end or lr_end < 0:
        raise InvalidConfig("need lr_start >= lr_end >= 0")
    if total == 1 or lr_start == lr_end:
        return float(lr_start)
    if lr_end == 0:
        raise InvalidConfig("exponential schedule needs lr_end > 0")
    return float(lr_start * (lr_end / lr_start) ** (e / (total - 1)))


def build_universe(cfg: TrainConfig, noise_scale: float = 1.0) -> SpeakerUniverse:
    u = cfg.universe
    return gen_universe(u.K_train, u.K_unseen, u.d_feat, u.kappa, u.utts_per_speaker, cfg.seed, noise_scale)


def training_labels(cfg: TrainConfig, universe: SpeakerUniverse):
    labels = universe.train.label_array(universe.train_speakers)
    if cfg.label_noise > 0:
        labels, _ = inject_label_noise(labels, cfg.label_noise, len(universe.train_speakers), cfg.seed)
    return labels


def _batches(cfg: TrainConfig, features, labels, epoch):
    if cfg.loss.is_proto:
        for f, y in batch_sampler_proto(features, labels, cfg.proto_n, cfg.proto_m, cfg.seed, epoch):
            yield f, y, (cfg.proto_n, cfg.proto_m)
    else:
        for f, y in batch_sampler_classification(features, labels, cfg.batch_size, cfg.seed, epoch):
            yield f, y, None


def fit(model: Model, state: SgdState, cfg: TrainConfig, features, labels, lrs, start_epoch=0):
    """Run epochs ``start_epoch .. len(lrs)-1``; returns (model, state, mean loss per epoch)."""
    history = []
    for epoch in range(start_epoch, len(lrs)):
        total, count = 0.0, 0
        for step, (f, y, shape) in enumerate(_batches(cfg, features, labels, epoch)):
            try:
                with np.errstate(over="raise", invalid="raise", divide="raise", under="ignore"):
                    value, grads = loss_and_grads(model, f, y, shape)
                    if not math.isfinite(value):
                        raise NonFinite("loss is non-finite")
                    model, state = apply_gradients(model, grads, state, lrs[epoch], cfg.momentum, cfg.weight_decay)
            except (NonFinite, FloatingPointError) as e:
                raise Diverged(f"epoch {epoch} step {step}: {e}") from e
            total += value * len(y)
            count += len(y)
        history.append(total / count)
        log.debug("epoch %d lr %.3g loss %.6f", epoch, lrs[epoch], history[-1])
    return model, state, history


def evaluate(model: Model, universe: SpeakerUniverse, cfg: TrainConfig) -> dict:
    """EER/minDCF on unseen-speaker trials, raw and (optionally) A-snormed."""
    ev = cfg.evaluation
    emb_unseen = model.embed(universe.unseen.features)
    emb = dict(zip(universe.unseen.utt_ids, emb_unseen))
    cohort = None
    if ev.asnorm:
        tr = model.embed(universe.train.features)
        groups = universe.train.by_speaker()
        cohort = np.stack([tr[groups[s]].mean(axis=0) for s in universe.train_speakers])
    sets = [("O", False, ev.p_target_plain)]
    if ev.hard_set:
        sets.append(("H", True, ev.p_target_hard))
    out = {}
    for name, hard, p in sets:
        trials = make_trials(universe.unseen, ev.n_target, ev.n_nontarget, cfg.seed, hard=hard)
        st = E.score_trials(emb, trials)
        m = {"eer": E.eer(st)[0], "mindcf": E.min_dcf(st, E.DcfParams(p))[0], "p_target": p}
        if cohort is not None:
            top = max(2, int(round(ev.asnorm_top_frac * cohort.shape[0])))
            sn = E.asnorm(st, trials, emb, cohort, top)
            m["eer_asnorm"] = E.eer(sn)[0]
            m["mindcf_asnorm"] = E.min_dcf(sn, E.DcfParams(p))[0]
        out[name] = m
    return out


def train(cfg: TrainConfig, universe: SpeakerUniverse | None = None) -> RunRecord:
    """Train from scratch and evaluate; deterministic in ``cfg``.

    Raises Diverged if a loss or parameter becomes non-finite.
    """
    universe = universe if universe is not None else build_universe(cfg)
    labels = training_labels(cfg, universe)
    rng = Rng(cfg.seed)
    sizes = [universe.d_feat, *cfg.hidden, cfg.emb_dim]
    model = Model.init(sizes, cfg.loss, len(universe.train_speakers), rng)
    lrs = [lr_at(e, cfg.epochs, cfg.lr_start, cfg.lr_end) for e in range(cfg.epochs)]
    model, state, history = fit(model, SgdState(), cfg, universe.train.features, labels, lrs)
    metrics = evaluate(model, universe, cfg)
    config = cfg.to_dict()
    ckpt = Checkpoint(model, state, cfg.epochs, config, cfg.seed, rng.path)
    return RunRecord(config, history, metrics, ckpt)


def resume(ckpt: Checkpoint, cfg: TrainConfig, universe: SpeakerUniverse | None = None) -> RunRecord:
    """Continue a run from a mid-training checkpoint to ``cfg.epochs``."""
    universe = universe if universe is not None else build_universe(cfg)
    labels = training_labels(cfg, universe)
    lrs = [lr_at(e, cfg.epochs, cfg.lr_start, cfg.lr_end) for e in range(cfg.epochs)]
    model, state, history = fit(ckpt.model, ckpt.state, cfg, universe.train.features, labels, lrs, ckpt.epoch)
    metrics = evaluate(model, universe, cfg)
    return RunRecord(cfg.to_dict(), history, metrics, Checkpoint(model, state, cfg.epochs, cfg.to_dict(), cfg.seed))


def lmft(ckpt: Checkpoint, cfg: TrainConfig, lcfg: LmftConfig = LmftConfig()) -> RunRecord:
    """Large-margin fine-tuning from a trained checkpoint.

    The margin is raised to ``lcfg.margin_override``, training runs at a
    constant ``lcfg.lr`` with fresh momentum, and the training utterances are
    regenerated with their noise scaled by ``lcfg.noise_factor``.
    Evaluation uses the standard unseen trials.
    """
    loss = ckpt.model.loss
    if loss.params is None:
        raise InvalidConfig(f"loss {loss.name!r} has no margin; LM-FT needs a margin-bearing loss")
    m0 = base_margin(loss.params)
    if lcfg.margin_override < m0:
        raise InvalidConfig(f"margin_override {lcfg.margin_override} is below the base margin {m0}")
    if lcfg.epochs < 1 or lcfg.lr < 0:
        raise InvalidConfig("LM-FT needs epochs >= 1 and lr >= 0")
    new_loss = loss.with_margin(lcfg.margin_override)
    model = Model(ckpt.model.sizes, new_loss, ckpt.model.n_classes, {k: v.copy() for k, v in ckpt.model.params.items()})
    ft_cfg = replace(cfg, loss=new_loss)
    clean = build_universe(cfg)
    ft_data = build_universe(cfg, noise_scale=lcfg.noise_factor)
    labels = training_labels(cfg, ft_data)
    lrs = [lcfg.lr] * lcfg.epochs
    model, state, history = fit(model, SgdState(), ft_cfg, ft_data.train.features, labels, lrs)
    metrics = evaluate(model, clean, cfg)
    config = ft_cfg.to_dict()
    config["lmft"] = asdict(lcfg)
    return RunRecord(config, history, metrics, Checkpoint(model, state, lcfg.epochs, config, cfg.seed))


# -- experiment drivers -----------------------------------------------------

# Hyperparameter ablation rows in print order; the margin block omits its repeat
# of the baseline row.
ABLATION_GRID = [
    dict(lam=0.7, t=3, s=32, m=0.2),
    dict(lam=0.8, t=3, s=32, m=0.2),
    dict(lam=0.7, t=2, s=32, m=0.2),
    dict(lam=0.7, t=3, s=32, m=0.2),
    dict(lam=0.7, t=4, s=32, m=0.2),
    dict(lam=0.7, t=3, s=24, m=0.2),
    dict(lam=0.7, t=3, s=32, m=0.2),
    dict(lam=0.7, t=3, s=40, m=0.2),
    dict(lam=0.7, t=3, s=32, m=0.1),
    dict(lam=0.7, t=3, s=32, m=0.3),
]


def _run_cell(cfg: TrainConfig):
    try:
        return train(cfg)
    except Diverged as e:
        return RunRecord(cfg.to_dict(), [], {}, None, diverged=str(e))


def _map(fn, items, jobs):
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_ablation(grid, base: TrainConfig, jobs: int = 1) -> list:
    """One training run per grid cell on identical data; diverged cells are recorded, not raised.

    Returns a list of ``(cell_dict, RunRecord)`` in grid order.
    """
    if not grid:
        raise InvalidConfig("ablation grid is empty")
    if base.loss.name != "sphereface2":
        raise InvalidConfig("ablation sweeps SphereFace2 hyperparameters")
    cfgs = []
    for cell in grid:
        unknown = set(cell) - {"lam", "t", "s", "m"}
        if unknown:
            raise InvalidConfig(f"unknown grid keys {sorted(unknown)}")
        params = replace(base.loss.params, **{k: float(v) for k, v in cell.items()})
        cfgs.append(replace(base, loss=replace(base.loss, params=params)))
    # repeated cells (the baseline recurs in every block) are trained once
    unique = list(dict.fromkeys(cfgs))
    done = dict(zip(unique, _map(_run_cell, unique, jobs)))
    resolved = [{k: getattr(c.loss.params, k) for k in ("lam", "t", "s", "m")} for c in cfgs]
    return [(cell, done[c]) for cell, c in zip(resolved, cfgs)]


def ablation_table(results, trial_sets=("O", "H")):
    """Aligned text and CSV with columns (λ, t, s, m, EER per trial set)."""
    keys = ["lam", "t", "s", "m"]
    header = ["lambda", "t", "s", "m"] + [f"{s} EER%" for s in trial_sets]
    rows = []
    for cell, rec in results:
        row = [f"{cell[k]:g}" for k in keys]
        for s in trial_sets:
            if rec.diverged or s not in rec.metrics:
                row.append("diverged" if rec.diverged else "-")
            else:
                row.append(f"{100 * rec.metrics[s]['eer']:.3f}")
        rows.append(row)
    return _render(header, rows)


def _render(header, rows):
    widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
    text = "\n".join(
        ["  ".join(h.rjust(w) for h, w in zip(header, widths)), "  ".join("-" * w for w in widths)]
        + ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    ) + "\n"
    csv_text = "\n".join([",".join(header)] + [",".join(r) for r in rows]) + "\n"
    return text, csv_text


@dataclass
class NoiseCell:
    loss: str
    proportion: float
    seed: int
    eer: float
    degradation: float
    diverged: str | None = None


def _noise_cfg(base: TrainConfig, loss_name: str, p: float, seed: int) -> TrainConfig:
    loss = base.loss if loss_name == "base" else named_loss(loss_name)
    return replace(
        base,
        loss=loss,
        seed=seed,
        label_noise=p,
        evaluation=replace(base.evaluation, asnorm=False),
    )


def run_noise_study(proportions, losses, seeds, base: TrainConfig, jobs: int = 1, trial_set: str = "O") -> list:
    """Train every (loss, proportion, seed) cell on noise-corrupted labels.

    Degradation is relative to the 0%-noise run of the same loss and seed:
    (EER_p - EER_0) / EER_0. A-snorm is always disabled here.
    """
    props = [float(p) for p in proportions]
    if any(not 0 <= p <= 1 for p in props):
        raise InvalidConfig("noise proportions must lie in [0, 1]")
    need = sorted(set([0.0] + props))
    keys = [(l, p, s) for l in losses for s in seeds for p in need]
    records = _map(_run_cell, [_noise_cfg(base, l, p, s) for l, p, s in keys], jobs)
    by_key = dict(zip(keys, records))
    cells = []
    for l in losses:
        for p in props:
            for s in seeds:
                rec = by_key[(l, p, s)]
                clean = by_key[(l, 0.0, s)]
                if rec.diverged or clean.diverged:
                    cells.append(NoiseCell(l, p, s, float("nan"), float("nan"), rec.diverged or clean.diverged))
                    continue
                e = rec.metrics[trial_set]["eer"]
                e0 = clean.metrics[trial_set]["eer"]
                deg = 0.0 if p == 0 else (e - e0) / e0 if e0 > 0 else float("inf")
                cells.append(NoiseCell(l, p, s, e, deg))
    return cells


def noise_table(cells):
    header = ["loss", "noise%", "seed", "EER%", "rel.degradation"]
    rows = []
    for c in cells:
        rows.append(
            [
                c.loss,
                f"{100 * c.proportion:g}",
                str(c.seed),
                "diverged" if c.diverged else f"{100 * c.eer:.3f}",
                "diverged" if c.diverged else f"{c.degradation:.4f}",
            ]
        )
    return _render(header, rows)


def noise_summary(cells):
    """Mean relative degradation per (loss, proportion)."""
    out: dict = {}
    for c in cells:
        out.setdefault((c.loss, c.proportion), []).append(c.degradation)
    return {k: float(np.mean(v)) for k, v in out.items()}
