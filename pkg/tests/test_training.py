import math

import numpy as np
import pytest

from mtaae.model import AAEModel, ArchConfig
from mtaae.nn import ConfigError
from mtaae.pipeline import SegmentSet
from mtaae.training import (JsonlLog, PhaseLosses, PlateauSchedule, TrainConfig, Trainer, fit,
                            evaluate_utterances, pretrain_auxiliary)

# small geometry so each step takes milliseconds; latent grid is 8 x 4 x 4
TINY = ArchConfig(input_shape=(32, 64), enc_channels=(4, 4, 8), enc_kernel=3, head_channels=4,
                  head_hidden=16)
COUNTS = {"emotion": 4, "gender": 2, "speaker": 3}


def make_set(n, seed=0, labeled=True, utt_per=1):
    rng = np.random.default_rng(seed)
    emo = rng.integers(0, 4, n)
    x = rng.standard_normal((n, 1, 32, 64)).astype(np.float32) + emo[:, None, None, None] * 0.5
    targets = {"emotion": emo if labeled else np.full(n, -1),
               "gender": rng.integers(0, 2, n), "speaker": rng.integers(0, 3, n)}
    uids = [f"u{i // utt_per}" for i in range(n)]
    return SegmentSet(x, uids, {k: np.asarray(v, dtype=np.int64) for k, v in targets.items()})


def trainer(seed=0, **cfg):
    model = AAEModel(COUNTS, TINY, seed=seed)
    cfg.setdefault("learning_rate", 0.01)
    cfg.setdefault("lr_floor", 0.001)
    cfg.setdefault("batch_size", 8)
    cfg.setdefault("recon_reduction", "mean")
    return Trainer(model, TrainConfig(seed=seed, **cfg))


def snapshot(model):
    return {k: v.tobytes() for k, v in model.state_dict().items()}


def changed(before, model):
    after = snapshot(model)
    return {k for k in before if before[k] != after[k]}


def groups_of(names):
    out = set()
    for n in names:
        parts = n.split(".")
        out.add(".".join(parts[:2]) if parts[0] == "heads" else parts[0])
    return out


# ---------------------------------------------------------------- config and losses

def test_config_validation():
    for bad in (dict(alpha=0), dict(alpha=1.5), dict(beta=1.0), dict(batch_size=0),
                dict(learning_rate=1e-5, lr_floor=1e-5), dict(aux_mix_ratio=1.0),
                dict(task_set=("valence",)), dict(recon_reduction="max")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()
    TrainConfig().validate()


def test_loss_composition_example():
    p = PhaseLosses(2.0, 1.0, 0.5, 0.5, 0.0, 0.0, alpha=0.4, beta=0.6)
    assert p.l_c == pytest.approx(1.0) and p.l_mtae == pytest.approx(1.8)
    assert "alpha" not in p.to_dict() and p.to_dict()["l_mtae"] == p.l_mtae


def test_beta_one_limit_drops_auxiliary_terms():
    p = PhaseLosses(1.0, 0.7, 3.0, 4.0, 0.0, 0.0, alpha=0.4, beta=1.0)
    assert p.l_c == 0.7


def test_logged_losses_satisfy_identities(tmp_path):
    t = trainer()
    data = make_set(24)
    with JsonlLog(tmp_path / "log.jsonl") as log:
        for x, y in t.batches(data):
            log(t.train_step(x, y).to_dict())
    import json
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(rows) == 3
    for r in rows:
        assert r["l_c"] == 0.6 * r["l_e"] + (1 - 0.6) * (r["l_g"] + r["l_s"])
        assert r["l_mtae"] == 0.4 * r["l_ae"] + r["l_c"]


# ---------------------------------------------------------------- phases

def test_event_order():
    t = trainer()
    x, y = next(t.batches(make_set(8)))
    t.train_step(x, y)
    t.train_step(x, y)
    assert t.events == ["recon", "disc", "gen", "classify"] * 2


def test_phase_freeze():
    t = trainer()
    m = t.model
    x, y = next(t.batches(make_set(8)))
    before = snapshot(m)
    t.reconstruction_phase(x)
    assert groups_of(changed(before, m)) == {"encoder", "decoder"}

    before = snapshot(m)
    t.regularization_phase(x)
    assert groups_of(changed(before, m)) == {"discriminator", "encoder"}

    before = snapshot(m)
    t.classification_phase(x, y)
    assert groups_of(changed(before, m)) <= {"encoder", "heads.emotion", "heads.gender", "heads.speaker"}
    assert "encoder" in groups_of(changed(before, m))


def test_generator_step_leaves_discriminator_bytes():
    t = trainer()
    m = t.model
    x, _ = next(t.batches(make_set(8)))
    steps = []
    original = t.opt.step

    def spy(names):
        steps.append(({k for k in names}, snapshot(m)))
        original(names)

    t.opt.step = spy
    t.regularization_phase(x)
    (disc_names, _), (gen_names, pre_gen) = steps
    assert groups_of(disc_names) == {"discriminator"}
    assert groups_of(gen_names) == {"encoder"}
    post = snapshot(m)
    assert all(pre_gen[k] == post[k] for k in post if k.startswith("discriminator"))


def test_chance_discriminator_loss_is_ln2():
    t = trainer()
    x, _ = next(t.batches(make_set(8)))
    l_disc, l_gen = t.regularization_phase(x)
    assert l_disc == pytest.approx(math.log(2), rel=1e-5)
    # the generator term is measured after one discriminator step
    assert l_gen == pytest.approx(math.log(2), abs=0.01)


def test_saturating_generator_flag():
    t = trainer(saturating_generator=True)
    x, _ = next(t.batches(make_set(8)))
    _, l_gen = t.regularization_phase(x)
    assert l_gen < 0 and l_gen == pytest.approx(math.log(0.5), abs=0.01)


def test_mean_reduction_scales_sum():
    a, b = trainer(recon_reduction="sum"), trainer(recon_reduction="mean")
    x, _ = next(a.batches(make_set(8)))
    assert b.reconstruction_phase(x) == pytest.approx(a.reconstruction_phase(x) / x[0].size, rel=1e-6)


def test_fully_unlabeled_batch_leaves_emotion_head():
    t = trainer()
    x, y = next(t.batches(make_set(8, labeled=False)))
    before = snapshot(t.model)
    l_e, l_g, l_s = t.classification_phase(x, y)
    assert l_e == 0.0 and l_g > 0 and l_s > 0
    assert not any(k.startswith("heads.emotion") for k in changed(before, t.model))


def test_stl_mode_updates_only_emotion_head():
    t = trainer(task_set=("emotion",))
    x, y = next(t.batches(make_set(8)))
    before = snapshot(t.model)
    losses = t.train_step(x, y)
    assert losses.l_g == 0 and losses.l_s == 0 and losses.l_e > 0
    moved = groups_of(changed(before, t.model))
    assert "heads.emotion" in moved and not moved & {"heads.gender", "heads.speaker"}


def test_missing_head_rejected():
    with pytest.raises(ConfigError):
        Trainer(AAEModel({"emotion": 4}, TINY), TrainConfig(task_set=("emotion", "gender")))


def test_nan_loss_aborts():
    t = trainer()
    x, y = next(t.batches(make_set(8)))
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(Exception, match="non-finite"):
        t.train_step(x, y)


# ---------------------------------------------------------------- batching

def test_batch_composition():
    t = trainer(aux_mix_ratio=0.25)
    lab, aux = make_set(20), make_set(5, seed=1, labeled=False)
    batches = list(t.batches(lab, aux))
    # ceil(0.25 * 8) = 2 auxiliary samples, 6 labelled
    assert len(batches) == math.ceil(20 / 6)
    for x, y in batches[:-1]:
        assert x.shape[0] == 8 and (y["emotion"][-2:] == -1).all() and (y["emotion"][:6] >= 0).all()
    plain = trainer(aux_mix_ratio=0.25)
    assert all(x.shape[0] <= 8 for x, _ in plain.batches(lab))
    assert sum(x.shape[0] for x, _ in plain.batches(lab)) == 20


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        t = trainer(seed=4, aux_mix_ratio=0.5)
        lab, aux = make_set(16), make_set(8, seed=1, labeled=False)
        runs.append([t.train_step(x, y).to_dict() for x, y in t.batches(lab, aux)])
    assert runs[0] == runs[1]


# ---------------------------------------------------------------- pretraining

def test_pretraining_zero_epochs_preserves_init():
    t = trainer()
    before = snapshot(t.model)
    pretrain_auxiliary(t, make_set(8), 0)
    assert not changed(before, t.model)


def test_pretraining_masks_emotion_and_hands_over_weights():
    t = trainer()
    before = snapshot(t.model)
    records = []
    pretrain_auxiliary(t, make_set(16), 1, records.append)
    moved = changed(before, t.model)
    assert all(r["l_e"] == 0.0 for r in records) and len(records) == 2
    assert not any(k.startswith("heads.emotion") for k in moved)
    handed = snapshot(t.model)
    fit_trainer = t  # the main run continues from the same model object
    assert snapshot(fit_trainer.model) == handed


# ---------------------------------------------------------------- schedule and fit

def test_schedule_trace_stagnant():
    s = PlateauSchedule(1e-4, patience=5, floor=1e-5)
    actions, lrs = [], []
    for _ in range(40):
        a = s.update(0.5)
        actions.append(a)
        if a in ("halve", "stop"):
            lrs.append(s.lr)
        if a == "stop":
            break
    assert actions[0] == "improved"
    assert lrs == pytest.approx([5e-5, 2.5e-5, 1.25e-5, 6.25e-6])
    assert s.halvings == 4 and actions[-1] == "stop"
    assert len(actions) - 1 == 20  # stagnant epochs after the first


def test_schedule_never_halves_when_improving():
    s = PlateauSchedule(1e-4)
    assert all(s.update(float(i)) == "improved" for i in range(50)) and s.lr == 1e-4


def test_fit_returns_best_checkpoint():
    t = trainer(max_epochs=4, patience=1)
    train, val = make_set(24), make_set(12, seed=3, utt_per=2)
    log = []
    res = fit(t, train, val, log_fn=log.append)
    epochs = [r for r in log if r["kind"] == "epoch"]
    assert len(epochs) == res.epochs_run == len(res.history)
    assert res.best_ua == max(r["val_ua"] for r in epochs)
    assert evaluate_utterances(t.model, val).ua == pytest.approx(res.best_ua)
    steps = [r for r in log if r["kind"] == "step"]
    assert steps and all({"l_ae", "l_mtae", "lr"} <= set(r) for r in steps)


def test_fit_rejects_empty_split():
    t = trainer()
    empty = make_set(8).subset([])
    with pytest.raises(ValueError):
        fit(t, make_set(8), empty)
