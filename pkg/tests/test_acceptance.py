"""End-to-end acceptance criteria.  Each test records a PASS/FAIL verdict that the
session summary prints as one line per criterion, then asserts it."""
import json
import math
import time
import warnings

import numpy as np
import pytest

from conftest import record
from mtaae import cli, synth
from mtaae.data import LEVEL_RULES, make_splits, map_levels
from mtaae.evaluation import compute_eer, compute_wa_ua, group_posteriors, utterance_posteriors
from mtaae.model import DESK_ARCH, AAEModel, ArchConfig, PriorSampler
from mtaae.nn import (BatchNorm2d, Conv2d, ConvTranspose2d, Dense, Dropout, Flatten, MaxPool2d,
                      ReLU, Sequential, Softmax, grad_check)
from mtaae.pipeline import Normalizer, build_segment_set
from mtaae.runner import MODES, Corpus, LabelSpace, evaluate_records, segment_set_for, train_fold
from mtaae.training import JsonlLog, PlateauSchedule, TrainConfig, Trainer, fit
from test_data import check_split_invariants
from test_data import corpus as random_corpus
from test_evaluation import brute_eer

F64 = np.float64
SEEDS = range(20)

# desk training profile shared by the training-based criteria
DESK = dict(learning_rate=0.01, lr_floor=0.001, batch_size=8, recon_reduction="mean")

# prior matching run
PRIOR_EPOCHS = 20

# multi-task ordering run
MTL_SEEDS = range(5)
MTL_EPOCHS = 2
MTL_AUX_UTTERANCES = 4
# auxiliary speakers first train the speaker and gender tasks alone, then the
# emotional data takes over from those weights
MTL_AUX_PRETRAIN_EPOCHS = 1


@pytest.fixture(scope="module")
def clean_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("clean")
    synth.generate(synth.SynthSpec(n_speakers=10, utterances_per_speaker=20, snr_db=40, seed=0), root)
    return Corpus(root / "manifest.jsonl")


def clean_segments(corpus: Corpus, n: int, dtype=np.float32):
    """First segment of ``n`` utterances drawn in a fixed shuffled order, standardised and labelled."""
    # a fixed shuffle so every batch spans several speakers and emotions
    order = np.random.default_rng(0).permutation(len(corpus.records))[:n]
    recs = [corpus.records[i] for i in order]
    segs = [corpus.segments([r])[0] for r in recs]
    labels = LabelSpace("categorical", ["angry", "happy", "neutral", "sad"])
    norm = Normalizer.fit(np.stack([s.values for s in segs]))
    speakers = sorted({r.speaker_id for r in recs})
    return build_segment_set(segs, labels.targets(recs), speakers, norm, dtype), len(speakers)


# ---------------------------------------------------------------- 1. gradients

def _layer_cases(seed):
    r = np.random.default_rng(seed)
    distinct = r.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8).astype(F64) / 10
    away_from_zero = r.choice([-1, 1], (3, 7)) * r.uniform(0.1, 1.0, (3, 7))
    bn = BatchNorm2d(3, dtype=F64)
    bn.weight.data[...] = r.uniform(0.5, 2, 3)
    bn.bias.data[...] = r.normal(0, 0.5, 3)
    return [
        ("conv2d", Conv2d(2, 3, 3, 1, 1, rng=r, dtype=F64), r.standard_normal((2, 2, 6, 6)), 1e-4),
        ("conv2d_strided", Conv2d(2, 3, 3, 2, 1, rng=r, dtype=F64), r.standard_normal((2, 2, 7, 7)), 1e-4),
        ("tconv2d", ConvTranspose2d(3, 2, 3, 2, 1, rng=r, dtype=F64), r.standard_normal((2, 3, 4, 4)), 1e-4),
        ("tconv2d_up", ConvTranspose2d(3, 2, (2, 4), (2, 4), 0, rng=r, dtype=F64),
         r.standard_normal((2, 3, 3, 3)), 1e-4),
        ("maxpool", MaxPool2d((2, 4)), distinct, 1e-4),
        ("dense", Dense(5, 4, rng=r, dtype=F64), r.standard_normal((3, 5)), 1e-4),
        ("relu", ReLU(), away_from_zero, 1e-4),
        ("softmax", Softmax(), r.standard_normal((3, 5)), 1e-4),
        ("dropout", Dropout(0.3, rng=r), r.standard_normal((3, 7)), 1e-4),
        ("flatten", Flatten(), r.standard_normal((2, 3, 2, 2)), 1e-4),
        ("batchnorm", bn, r.standard_normal((4, 3, 3, 3)), 1e-3),
    ]


# small geometry so the whole encoder->head stack can be probed entry by entry
GC_ARCH = ArchConfig(input_shape=(16, 32), enc_channels=(3, 4, 4), enc_kernel=3, head_channels=3,
                     head_hidden=5)


def test_c1_gradient_correctness():
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    failures = []
    for seed in SEEDS:
        for name, layer, x, tol in _layer_cases(seed):
            err = grad_check(layer, x, seed=seed, eps=1e-6).max_error
            worst[name] = max(worst.get(name, 0.0), err)
            if err >= tol:
                failures.append((name, seed, err))
        m = AAEModel({"emotion": 4, "gender": 2, "speaker": 3}, GC_ARCH, seed=seed, precision="f64")
        x = np.random.default_rng(100 + seed).standard_normal((4, 1, 16, 32))
        for head in ("emotion", "speaker"):
            net = Sequential(*m.encoder.layers, *m.heads[head].layers)
            # a small step keeps max-pool and ReLU away from their kinks
            rep = grad_check(net, x, seed=seed, max_entries=30, eps=1e-6)
            for pname, err in rep.per_param.items():
                tol = 1e-3 if isinstance(net.layers[int(pname.split(".")[0])], BatchNorm2d) else 1e-4
                worst["stack"] = max(worst.get("stack", 0.0), err)
                if err >= tol:
                    failures.append((f"stack/{head}/{pname}", seed, err))
            if rep.input_error is not None and rep.input_error >= 1e-4:
                failures.append((f"stack/{head}/input", seed, rep.input_error))
    elapsed = time.perf_counter() - t0
    ok = record(1, "gradient correctness", not failures and elapsed < 120,
                f"worst {max(worst.values()):.1e} over {len(SEEDS)} seeds, {elapsed:.0f}s")
    assert ok, (failures[:5], elapsed)


# ---------------------------------------------------------------- 2. loss identities

def test_c2_loss_identity_audit(clean_corpus, tmp_path):
    data, n_spk = clean_segments(clean_corpus, 40)
    cfg = TrainConfig(seed=0, alpha=0.4, beta=0.6, **{**DESK, "batch_size": 4})
    t = Trainer(AAEModel({"emotion": 4, "gender": 2, "speaker": n_spk}, DESK_ARCH, seed=0), cfg)
    with JsonlLog(tmp_path / "log.jsonl") as log:
        steps = 0
        while steps < 50:
            for x, y in t.batches(data):
                log(t.train_step(x, y).to_dict())
                steps += 1
                if steps == 50:
                    break
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    bad = [r for r in rows
           if r["l_c"] != 0.6 * r["l_e"] + (1 - 0.6) * (r["l_g"] + r["l_s"])
           or r["l_mtae"] != 0.4 * r["l_ae"] + r["l_c"]]
    ok = record(2, "loss identities", len(rows) == 50 and not bad, f"{len(rows)} steps, {len(bad)} violations")
    assert ok


# ---------------------------------------------------------------- 3. phase freezing

def _groups(model):
    out = {}
    for name, arr in model.state_dict().items():
        parts = name.split(".")
        group = ".".join(parts[:2]) if parts[0] == "heads" else parts[0]
        out.setdefault(group, []).append(arr.tobytes())
    return out


def _moved(before, after):
    return {g for g in before if before[g] != after[g]}


def test_c3_phase_freeze_audit(clean_corpus):
    data, n_spk = clean_segments(clean_corpus, 8)
    m = AAEModel({"emotion": 4, "gender": 2, "speaker": n_spk}, DESK_ARCH, seed=0)
    t = Trainer(m, TrainConfig(seed=0, **DESK))
    snaps = [_groups(m)]
    original = t.opt.step

    def spy(names):
        original(names)
        snaps.append(_groups(m))

    t.opt.step = spy
    x, y = next(t.batches(data))
    t.train_step(x, y)
    moved = [_moved(a, b) for a, b in zip(snaps, snaps[1:])]
    heads = {"heads.emotion", "heads.gender", "heads.speaker"}
    expected = [{"encoder", "decoder"}, {"discriminator"}, {"encoder"}, {"encoder"} | heads]
    ok = record(3, "phase freezing", moved == expected and t.events == ["recon", "disc", "gen", "classify"],
                " | ".join(",".join(sorted(s)) for s in moved))
    assert ok, moved


# ---------------------------------------------------------------- 4. shapes

def test_c4_shape_fidelity():
    counts = {"emotion": 4, "gender": 2, "speaker": 5}
    desk, full = AAEModel(counts, DESK_ARCH, seed=0), AAEModel(counts, ArchConfig(), seed=0)
    rng = np.random.default_rng(0)
    bad = []
    for b in range(1, 65):
        x = rng.standard_normal((b, 1, 128, 256)).astype(np.float32)
        for name, m in (("desk", desk), ("full", full)) if b in (1, 17, 64) else (("desk", desk),):
            z = m.encode(x)
            if z.shape != (b, 32, 16, 16) or m.decode(z).shape != (b, 1, 128, 256):
                bad.append((name, b))
    ok = record(4, "shape fidelity", not bad, "desk b=1..64, full b=1,17,64")
    assert ok, bad


# ---------------------------------------------------------------- 5. overfit sanity

def test_c5_overfit_sanity(clean_corpus):
    t0 = time.perf_counter()
    data, n_spk = clean_segments(clean_corpus, 32)
    t = Trainer(AAEModel({"emotion": 4, "gender": 2, "speaker": n_spk}, DESK_ARCH, seed=0),
                TrainConfig(seed=0, **DESK))
    recon = []
    while len(recon) < 300:
        for x, y in t.batches(data):
            recon.append(t.train_step(x, y).l_ae)
            if len(recon) == 300:
                break
    per_epoch = math.ceil(32 / DESK["batch_size"])
    # both ends measured as training-mode batch losses averaged over one pass
    ratio = np.mean(recon[:per_epoch]) / np.mean(recon[-per_epoch:])
    probs = t.model.classify("emotion", t.model.encode(data.x))
    acc = float((probs.argmax(axis=1) == data.targets["emotion"]).mean())
    elapsed = time.perf_counter() - t0
    ok = record(5, "overfit sanity", ratio >= 10 and acc >= 0.95 and elapsed < 300,
                f"recon reduced {ratio:.1f}x (need 10x), emotion train acc {100 * acc:.1f}%, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 6. prior matching

def _latent_report(model, data, seed=99):
    z = model.encode(data.x)
    prior = PriorSampler(model.arch.latent_shape, seed, model.dtype).sample(len(z))
    fake_hits = (model.discriminate(z)[:, 1] > 0.5).mean()
    real_hits = (model.discriminate(prior)[:, 0] >= 0.5).mean()
    return float(z.mean()), float(z.var()), float(0.5 * (fake_hits + real_hits))


def test_c6_prior_matching(clean_corpus):
    fold = make_splits(clean_corpus.records, "tenfold", seed=0).folds[0]
    cfg = TrainConfig(seed=0, max_epochs=PRIOR_EPOCHS, aux_mix_ratio=0.0, **DESK)
    held = {}
    reports = {}

    def probe(model, epoch):
        if not held:
            norm = Normalizer.fit(np.stack([s.values for s in clean_corpus.segments(
                clean_corpus.select(fold.train))]))
            held["x"] = segment_set_for(clean_corpus, clean_corpus.select(fold.test), model, norm,
                                        LabelSpace.from_meta(model.meta))
            # the same seed rebuilds the untrained model exactly
            start = AAEModel(model.class_counts, DESK_ARCH, seed=0, meta=model.meta)
            reports[0] = _latent_report(start, held["x"])
        reports[epoch] = _latent_report(model, held["x"])

    tf = train_fold(clean_corpus, fold, cfg, arch=DESK_ARCH, epoch_end=probe)
    last = max(reports)
    (m0, v0, _), (m1, v1, acc) = reports[0], reports[last]
    gap0, gap1 = abs(m0) + abs(v0 - 1), abs(m1) + abs(v1 - 1)
    ok = abs(m1) < 0.2 and abs(v1 - 1) < 0.3 and gap1 < gap0 and abs(acc - 0.5) <= 0.15
    ua = evaluate_records(tf.model, tf.normalizer, clean_corpus, fold.test).ua
    record(6, "prior matching", ok,
           f"after epoch {last}: mean {m0:+.3f}->{m1:+.3f}, var {v0:.3f}->{v1:.3f}, "
           f"held-out disc acc {100 * acc:.0f}% (need 35-65), best-checkpoint test UA {ua:.0f}%")
    assert ok


# ---------------------------------------------------------------- 7. multi-task ordering

@pytest.fixture(scope="module")
def noisy_corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("noisy")
    synth.generate(synth.SynthSpec(n_speakers=20, utterances_per_speaker=50, snr_db=10, seed=0), root / "main")
    synth.generate(synth.SynthSpec(n_speakers=200, utterances_per_speaker=MTL_AUX_UTTERANCES, snr_db=10,
                                   seed=1, label_emotion=False, speaker_prefix="aux"), root / "aux")
    return Corpus(root / "main" / "manifest.jsonl"), Corpus(root / "aux" / "manifest.jsonl")


def test_c7_multitask_ordering(noisy_corpora):
    t0 = time.perf_counter()
    main, aux = noisy_corpora
    split = make_splits(main.records, "tenfold", seed=0)
    ua = {mode: [] for mode in MODES}
    for seed in MTL_SEEDS:
        fold = split.folds[seed]
        for mode in MODES:
            cfg = TrainConfig(seed=seed, task_set=MODES[mode], max_epochs=MTL_EPOCHS, aux_mix_ratio=0.0,
                              pretrain_epochs=MTL_AUX_PRETRAIN_EPOCHS if mode == "mtl-aux" else 0, **DESK)
            tf = train_fold(main, fold, cfg, arch=DESK_ARCH, aux=aux if mode == "mtl-aux" else None)
            ua[mode].append(evaluate_records(tf.model, tf.normalizer, main, fold.test).ua)
    means = {k: float(np.mean(v)) for k, v in ua.items()}
    elapsed = time.perf_counter() - t0
    ok = means["mtl"] > means["stl"] and means["mtl-aux"] >= means["mtl"] and elapsed < 1800
    record(7, "multi-task ordering", ok,
           ", ".join(f"{k} {v:.1f}" for k, v in means.items()) + f" UA over {len(MTL_SEEDS)} seeds, {elapsed:.0f}s")
    assert ok, ua


# ---------------------------------------------------------------- 8. schedule

TINY = ArchConfig(input_shape=(32, 64), enc_channels=(4, 4, 8), enc_kernel=3, head_channels=4,
                  head_hidden=8)


def test_c8_schedule_arithmetic(monkeypatch):
    from mtaae import training
    from test_training import make_set

    class Flat:
        ua, wa = 50.0, 50.0

    # validation never moves, so every epoch after the first is stagnant
    monkeypatch.setattr(training, "evaluate_utterances", lambda *a, **k: Flat())
    model = AAEModel({"emotion": 4, "gender": 2, "speaker": 3}, TINY, seed=0)
    t = Trainer(model, TrainConfig(learning_rate=1e-4, lr_floor=1e-5, patience=5, batch_size=8,
                                   recon_reduction="mean", max_epochs=200))
    log = []
    res = fit(t, make_set(8), make_set(4, seed=1), log_fn=log.append)
    epochs = [r for r in log if r["kind"] == "epoch"]
    halved_at = [r["epoch"] for r in epochs if r["halved"]]
    # each epoch logs the rate it trained with; the last halving is applied as the run stops
    rates = [r["lr"] for r in epochs] + [t.lr]
    expected = [1e-4] * 6 + [5e-5] * 5 + [2.5e-5] * 5 + [1.25e-5] * 5 + [6.25e-6]
    ok = (halved_at == [6, 11, 16, 21] and np.allclose(rates, expected, rtol=1e-12, atol=0)
          and res.epochs_run == 21)

    s = PlateauSchedule(1e-4, patience=5, floor=1e-5)
    actions = [s.update(0.5) for _ in range(21)]
    ok = ok and s.halvings == 4 and actions[-1] == "stop" and "stop" not in actions[:-1]
    record(8, "schedule arithmetic", ok, f"halved at epochs {halved_at} to {t.lr:.3g}, stopped after {res.epochs_run} epochs")
    assert ok


# ---------------------------------------------------------------- 9. metrics

def test_c9_metric_oracles():
    checks = {}
    eer_ok = True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        g = rng.normal(0.5, 0.3, rng.integers(1, 40)).round(rng.integers(1, 4))
        i = rng.normal(0.0, 0.3, rng.integers(1, 40)).round(rng.integers(1, 4))
        eer_ok &= abs(compute_eer(g, i)[0] - brute_eer(list(g), list(i))) <= 1e-9
    checks["eer"] = eer_ok

    r = compute_wa_ua([0] * 10 + [1] * 2, [0] * 8 + [1] * 2 + [1, 0], 2)
    s = compute_wa_ua([0, 0, 1, 1], [0, 0, 0, 0], 2)
    t = compute_wa_ua([0, 1, 2, 3, 3, 3], [0, 1, 1, 3, 3, 0], 4)
    checks["wa_ua"] = (math.isclose(r.wa, 75.0) and math.isclose(r.ua, 65.0)
                       and s.wa == 50.0 and s.ua == 50.0
                       and math.isclose(t.wa, 400 / 6) and math.isclose(t.ua, (1 + 1 + 0 + 2 / 3) / 4 * 100))

    seg = [[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7]]
    mean, pred = utterance_posteriors(seg)
    grouped = group_posteriors(["a", "b", "a"], [[0.9, 0.1], [0.3, 0.7], [0.2, 0.8]])
    checks["posteriors"] = (np.allclose(mean, [0.3, 1 / 3, 1.1 / 3]) and pred == 2
                            and utterance_posteriors([[0.6, 0.4], [0.2, 0.8], [0.7, 0.3]])[1] == 0
                            and np.allclose(grouped["a"][0], [0.55, 0.45]) and grouped["a"][1] == 0
                            and grouped["b"][1] == 1)

    cases = [("iemocap", 2.0, "low"), ("iemocap", 2.01, "medium"), ("iemocap", 3.5, "medium"),
             ("iemocap", 3.51, "high"), ("iemocap", 1.0, "low"), ("iemocap", 5.0, "high"),
             ("msp-improv", 2.5, "low"), ("msp-improv", 2.51, "medium"), ("msp-improv", 3.5, "medium"),
             ("msp-improv", 3.51, "high")]
    checks["map_levels"] = all(map_levels(v, LEVEL_RULES[c]) == lvl for c, v, lvl in cases)
    ok = record(9, "metric oracles", all(checks.values()),
                ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items()))
    assert ok, checks


# ---------------------------------------------------------------- 10. splits

def test_c10_split_integrity():
    failures = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        records = random_corpus(int(rng.integers(2, 16)), None, rng)
        for scheme in ("tenfold", "loso"):
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    check_split_invariants(records, make_splits(records, scheme, seed=seed))
            except AssertionError:
                failures.append((seed, scheme))
    ok = record(10, "split integrity", not failures, f"50 corpora x 2 schemes, {len(failures)} failures")
    assert ok, failures


# ---------------------------------------------------------------- 11. determinism

def test_c11_determinism(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path / "syn"), "--seed", "5", "--set", "n_speakers=4",
                     "--set", "utterances_per_speaker=10"]) == 0
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["train", "--manifest", str(tmp_path / "syn" / "manifest.jsonl"), "--out", str(out),
                         "--precision", "f64", "--seed", "3", "--set", "max_epochs=2"]) == 0
        outs.append(out)
    files = ["split.json", "fold_00/train_log.jsonl", "fold_00/model.ckpt"]
    same = {f: (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files}
    ok = record(11, "determinism", all(same.values()),
                ", ".join(f"{f} {'identical' if v else 'DIFFERS'}" for f, v in same.items()))
    assert ok, same
