import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sf2lab.core import Rng
from sf2lab.data import inject_label_noise
from sf2lab.errors import Diverged, InvalidConfig
from sf2lab.model import Checkpoint, Model, SgdState, checkpoint_bytes, checkpoint_from_bytes, named_loss
from sf2lab.train import (
    ABLATION_GRID,
    EvalConfig,
    LmftConfig,
    TrainConfig,
    UniverseConfig,
    ablation_table,
    build_universe,
    fit,
    lmft,
    lr_at,
    noise_summary,
    resume,
    run_ablation,
    run_noise_study,
    train,
    training_labels,
)

TINY_U = UniverseConfig(K_train=12, K_unseen=8, d_feat=8, kappa=32.0, utts_per_speaker=8)
TINY_E = EvalConfig(n_target=60, n_nontarget=60, hard_set=False, asnorm_top_frac=0.5)


def tiny_cfg(loss="sphereface2", **kw):
    base = TrainConfig(
        loss=named_loss(loss), epochs=3, batch_size=16, proto_n=4, proto_m=2,
        hidden=(8,), emb_dim=4, universe=TINY_U, evaluation=TINY_E,
    )
    return replace(base, **kw)


# -- schedule ---------------------------------------------------------------


def test_lr_endpoints_and_midpoint():
    assert lr_at(0, 5, 0.1, 1e-5) == 0.1
    assert lr_at(4, 5, 0.1, 1e-5) == pytest.approx(1e-5, rel=1e-12)
    assert lr_at(2, 5, 0.1, 1e-5) == pytest.approx(1e-3, rel=1e-12)


def test_lr_single_epoch_is_constant():
    assert lr_at(0, 1, 0.1, 1e-5) == 0.1


@pytest.mark.parametrize("e,total", [(-1, 5), (5, 5), (0, 0)])
def test_lr_out_of_range(e, total):
    with pytest.raises(InvalidConfig):
        lr_at(e, total, 0.1, 1e-5)


def test_lr_rejects_increasing_schedule():
    with pytest.raises(InvalidConfig):
        lr_at(0, 5, 1e-5, 0.1)


@given(
    st.integers(2, 200),
    st.floats(1e-4, 1.0),
    st.floats(1e-6, 1.0),
)
def test_lr_is_log_linear_and_non_increasing(total, lr_start, ratio):
    lr_end = lr_start * ratio
    logs = np.log([lr_at(e, total, lr_start, lr_end) for e in range(total)])
    assert np.all(np.diff(logs) <= 1e-12)
    step = (math.log(lr_end) - math.log(lr_start)) / (total - 1)
    np.testing.assert_allclose(logs, math.log(lr_start) + step * np.arange(total), atol=1e-12)


# -- training ---------------------------------------------------------------


def test_config_validation():
    with pytest.raises(InvalidConfig):
        tiny_cfg(epochs=0)
    with pytest.raises(InvalidConfig):
        tiny_cfg(lr_start=1e-3, lr_end=1e-2)


def test_config_dict_round_trip():
    cfg = tiny_cfg("aam", seed=4, label_noise=0.1)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_lr_leaves_parameters_unchanged():
    cfg = tiny_cfg(epochs=1, lr_start=0.0, lr_end=0.0, weight_decay=0.0)
    u = build_universe(cfg)
    model = Model.init([8, 8, 4], cfg.loss, 12, Rng(cfg.seed))
    out, _, history = fit(model, SgdState(), cfg, u.train.features, training_labels(cfg, u), [0.0])
    assert len(history) == 1
    for k in model.params:
        np.testing.assert_array_equal(out.params[k], model.params[k])


def test_zero_lr_run_through_train():
    rec = train(tiny_cfg(epochs=1, lr_start=0.0, lr_end=0.0))
    assert len(rec.epoch_losses) == 1


@pytest.mark.parametrize("loss", ["softmax", "aam", "sphereface2", "proto", "angproto"])
def test_same_seed_same_record(loss):
    a = train(tiny_cfg(loss, seed=3))
    b = train(tiny_cfg(loss, seed=3))
    assert a.to_text() == b.to_text()
    assert checkpoint_bytes(a.checkpoint) == checkpoint_bytes(b.checkpoint)


def test_different_seed_differs():
    assert train(tiny_cfg(seed=1)).to_text() != train(tiny_cfg(seed=2)).to_text()


def test_toy_run_loss_decreases():
    u = UniverseConfig(K_train=50, K_unseen=10, d_feat=16, kappa=32.0, utts_per_speaker=10)
    cfg = TrainConfig(epochs=20, hidden=(16,), emb_dim=8, universe=u, evaluation=TINY_E)
    rec = train(cfg)
    h = rec.epoch_losses
    assert len(h) == 20
    assert h[-1] < h[0]
    assert np.mean(h[-5:]) < h[0]


def test_resume_matches_uninterrupted_run():
    cfg = tiny_cfg(epochs=4)
    full = train(cfg)
    u = build_universe(cfg)
    labels = training_labels(cfg, u)
    model = Model.init([8, 8, 4], cfg.loss, 12, Rng(cfg.seed))
    lrs = [lr_at(e, cfg.epochs, cfg.lr_start, cfg.lr_end) for e in range(cfg.epochs)]
    model, state, _ = fit(model, SgdState(), cfg, u.train.features, labels, lrs[:2])
    blob = checkpoint_bytes(Checkpoint(model, state, 2, cfg.to_dict(), cfg.seed))
    rec = resume(checkpoint_from_bytes(blob), cfg)
    assert rec.metrics == full.metrics
    assert checkpoint_bytes(rec.checkpoint) == checkpoint_bytes(full.checkpoint)


def test_divergence_raises_with_context():
    cfg = tiny_cfg(loss="sphereface2")
    cfg = replace(cfg, loss=replace(cfg.loss, params=replace(cfg.loss.params, s=1e300)))
    with pytest.raises(Diverged, match=r"epoch 0 step 0"):
        train(cfg)


# -- large-margin fine-tuning -----------------------------------------------


def test_lmft_noop_reproduces_metrics():
    cfg = tiny_cfg(seed=5)
    rec = train(cfg)
    out = lmft(rec.checkpoint, cfg, LmftConfig(margin_override=0.2, lr=0.0, epochs=1))
    assert out.metrics == rec.metrics
    for k, v in rec.checkpoint.model.params.items():
        np.testing.assert_array_equal(out.checkpoint.model.params[k], v)


def test_lmft_raises_margin():
    cfg = tiny_cfg(loss="aam")
    rec = train(cfg)
    out = lmft(rec.checkpoint, cfg, LmftConfig(margin_override=0.35, lr=1e-3, epochs=2))
    assert out.checkpoint.model.loss.params.m3 == 0.0
    assert out.checkpoint.model.loss.params.m2 == 0.35
    assert len(out.epoch_losses) == 2


@pytest.mark.parametrize("loss", ["softmax", "proto", "angproto"])
def test_lmft_requires_margin_loss(loss):
    cfg = tiny_cfg(loss)
    rec = train(cfg)
    with pytest.raises(InvalidConfig):
        lmft(rec.checkpoint, cfg)


def test_lmft_rejects_smaller_margin():
    cfg = tiny_cfg()
    rec = train(cfg)
    with pytest.raises(InvalidConfig):
        lmft(rec.checkpoint, cfg, LmftConfig(margin_override=0.1))


# -- drivers ----------------------------------------------------------------


def test_single_cell_ablation_equals_train():
    cfg = tiny_cfg()
    [(cell, rec)] = run_ablation([dict(t=3)], cfg)
    assert cell == dict(lam=0.7, t=3, s=32.0, m=0.2)
    assert rec.to_text() == train(cfg).to_text()


def test_ablation_records_divergent_cell():
    results = run_ablation([dict(s=32), dict(s=1e300), dict(m=0.1)], tiny_cfg())
    assert [r.diverged is not None for _, r in results] == [False, True, False]
    text, csv_text = ablation_table(results, ("O",))
    assert "diverged" in text
    assert len(csv_text.splitlines()) == 4


def test_ablation_grid_shape():
    assert len(ABLATION_GRID) == 10
    assert {c["lam"] for c in ABLATION_GRID} == {0.7, 0.8}
    assert {c["t"] for c in ABLATION_GRID} == {2, 3, 4}
    assert {c["s"] for c in ABLATION_GRID} == {24, 32, 40}
    assert {c["m"] for c in ABLATION_GRID} == {0.1, 0.2, 0.3}


def test_ablation_validation():
    with pytest.raises(InvalidConfig):
        run_ablation([], tiny_cfg())
    with pytest.raises(InvalidConfig):
        run_ablation([dict(t=3)], tiny_cfg("aam"))
    with pytest.raises(InvalidConfig):
        run_ablation([dict(q=1)], tiny_cfg())


def test_noise_study_zero_proportion_has_zero_degradation():
    cells = run_noise_study([0.0, 0.3], ["aam"], [0, 1], tiny_cfg())
    zero = [c for c in cells if c.proportion == 0.0]
    assert len(zero) == 2 and all(c.degradation == 0.0 for c in zero)
    assert len(cells) == 4
    summary = noise_summary(cells)
    assert summary[("aam", 0.0)] == 0.0


def test_noise_study_rejects_bad_proportion():
    with pytest.raises(InvalidConfig):
        run_noise_study([1.5], ["aam"], [0], tiny_cfg())


def test_noise_mask_touches_training_labels_only():
    cfg = tiny_cfg(label_noise=0.3)
    u = build_universe(cfg)
    clean = u.train.label_array(u.train_speakers)
    noisy, mask = inject_label_noise(clean, 0.3, len(u.train_speakers), cfg.seed)
    assert mask.shape == (len(u.train),)
    assert mask.sum() == math.floor(0.3 * len(u.train) + 0.5)
    np.testing.assert_array_equal(noisy[~mask], clean[~mask])
    assert set(u.train.utt_ids).isdisjoint(u.unseen.utt_ids)
    assert set(u.train_speakers).isdisjoint(u.unseen_speakers)
    np.testing.assert_array_equal(training_labels(cfg, u), noisy)
