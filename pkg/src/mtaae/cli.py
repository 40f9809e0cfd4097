"""Command-line entry points: synth, preprocess, train, eval, sweep, verify.

Every command writes its outputs plus the fully resolved configuration under
one run directory (``--out``) and exits 0 on success, 1 on a runtime error and
2 on a usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import synth
from .data import FoldSplit, load_manifest, make_splits, merge_happy_excited
from .evaluation import error_rates, mean_std, split_enrolment, verification_protocol
from .model import DESK_ARCH, ArchConfig
from .nn import ConfigError, NonFiniteError
from .runner import (
    Corpus,
    check_loso_leakage,
    evaluate_records,
    load_trained,
    train_fold,
    utterance_dvectors,
)
from .training import JsonlLog

log = logging.getLogger("mtaae")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def worker_cap() -> int:
    raw = os.environ.get("MTAE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MTAE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("MTAE_THREADS must be at least 1")
    return n


def _arch(cfg) -> ArchConfig:
    return DESK_ARCH if cfg.arch == "desk" else ArchConfig()


def _require(cfg, *keys) -> None:
    missing = [k for k in keys if not getattr(cfg, k)]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join(missing)}")


def _run_dir(cfg) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.resolved")
    return out


def _corpus(manifest, cfg, cache_dir="") -> Corpus:
    records = load_manifest(manifest)
    if cfg.merge_excited:
        records = merge_happy_excited(records)
    return Corpus(manifest, cache_dir or None, records=records, segment_hop=cfg.segment_hop)


def _split(cfg, corpus: Corpus) -> FoldSplit:
    usable = [r for r in corpus.records if r.utterance_id not in corpus.failed]
    return make_splits(usable, cfg.scheme, cfg.seed)


# ---------------------------------------------------------------- commands

def cmd_synth(cfg) -> int:
    out = _run_dir(cfg)
    spec = synth.SynthSpec(n_speakers=cfg.n_speakers, utterances_per_speaker=cfg.utterances_per_speaker,
                           seed=cfg.seed, snr_db=cfg.snr_db)
    records = synth.generate(spec, out)
    print(f"wrote {len(records)} utterances to {out / 'manifest.jsonl'}")
    if cfg.aux_speakers:
        aux = synth.SynthSpec(n_speakers=cfg.aux_speakers, utterances_per_speaker=cfg.aux_utterances,
                              seed=cfg.seed + 1, snr_db=cfg.snr_db, label_emotion=False,
                              speaker_prefix="aux")
        aux_records = synth.generate(aux, out / "aux")
        print(f"wrote {len(aux_records)} emotion-unlabelled utterances to {out / 'aux' / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_preprocess(cfg) -> int:
    _require(cfg, "manifest")
    out = _run_dir(cfg)
    cache = cfg.cache_dir or str(out / "cache")
    corpus = _corpus(cfg.manifest, cfg, cache)
    report = {"cache_dir": str(corpus.cache_dir), "errors": corpus.failed,
              "n_records": len(corpus.records)}
    (out / "preprocess.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    for uid, err in sorted(corpus.failed.items()):
        print(f"error: {uid}: {err}", file=sys.stderr)
    print(f"{len(corpus.records) - len(corpus.failed)} of {len(corpus.records)} utterances cached in {corpus.cache_dir}")
    return EXIT_FAIL if corpus.failed else EXIT_OK


def _train_folds(cfg, out: Path, aux_ids=None) -> list[dict]:
    corpus = _corpus(cfg.manifest, cfg, cfg.cache_dir)
    aux = None
    if cfg.mode == "mtl-aux":
        _require(cfg, "aux_manifest")
        aux = _corpus(cfg.aux_manifest, cfg)
    split = _split(cfg, corpus)
    split.save(out / "split.json")
    summaries = []
    for i in cfg.fold_indices(len(split.folds)):
        fold_dir = out / f"fold_{i:02d}"
        fold_dir.mkdir(exist_ok=True)
        meta = {"scheme": cfg.scheme, "fold": i, "split_seed": cfg.seed, "mode": cfg.mode,
                "alpha": cfg.alpha, "beta": cfg.beta}
        with JsonlLog(fold_dir / "train_log.jsonl") as logf:
            trained = train_fold(corpus, split.folds[i], cfg.train_config(), arch=_arch(cfg),
                                 label_mode=cfg.label_mode, n_clusters=cfg.n_clusters,
                                 aux=aux, aux_ids=aux_ids, log_fn=logf, meta=meta)
        trained.save(fold_dir / "model.ckpt")
        summaries.append({"fold": i, "best_val_ua": trained.result.best_ua,
                          "best_epoch": trained.result.best_epoch, "epochs": trained.result.epochs_run})
        print(f"fold {i}: best validation UA {trained.result.best_ua:.2f}% at epoch "
              f"{trained.result.best_epoch} ({trained.result.epochs_run} epochs)")
    return summaries


def cmd_train(cfg) -> int:
    _require(cfg, "manifest")
    out = _run_dir(cfg)
    summaries = _train_folds(cfg, out)
    (out / "train_summary.json").write_text(json.dumps(summaries, indent=1, sort_keys=True))
    return EXIT_OK


def _checkpoints(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    found = sorted(path.glob("fold_*/model.ckpt"))
    if not found:
        raise UsageError(f"no checkpoint at {path} (expected a .ckpt file or a train run directory)")
    return found


def evaluate_run(cfg, out: Path) -> dict:
    corpus = _corpus(cfg.manifest, cfg, cfg.cache_dir)
    split = _split(cfg, corpus)
    per_fold = []
    total = None
    classes = None
    for ckpt in _checkpoints(Path(cfg.checkpoint)):
        model, normalizer = load_trained(ckpt)
        fold_idx = int(model.meta.get("fold", 0))
        if model.meta.get("scheme") not in (None, cfg.scheme):
            log.warning("%s was trained under %s, evaluating under %s", ckpt, model.meta.get("scheme"), cfg.scheme)
        if fold_idx >= len(split.folds):
            raise ConfigError(f"{ckpt}: fold {fold_idx} does not exist under {cfg.scheme}")
        test_ids = split.folds[fold_idx].test
        if cfg.scheme == "loso":
            check_loso_leakage(model, corpus.select(test_ids))
        report = evaluate_records(model, normalizer, corpus, test_ids)
        classes = report.classes
        total = report.confusion.copy() if total is None else total + report.confusion
        row = {"fold": fold_idx, "checkpoint": str(ckpt), **report.to_dict()}
        per_fold.append(row)
        (out / f"fold_{fold_idx:02d}.json").write_text(json.dumps(row, indent=1, sort_keys=True))
        _write_confusion_csv(out / f"confusion_fold_{fold_idx:02d}.csv", report.confusion, classes)
        print(f"fold {fold_idx}: WA {report.wa:.2f}%  UA {report.ua:.2f}%")
    wa = mean_std([r["wa"] for r in per_fold])
    ua = mean_std([r["ua"] for r in per_fold])
    summary = {"scheme": cfg.scheme, "n_folds": len(per_fold), "wa_mean": wa[0], "wa_std": wa[1],
               "ua_mean": ua[0], "ua_std": ua[1], "classes": classes, "confusion": total.tolist(),
               "folds": [r["fold"] for r in per_fold]}
    return summary


def _write_confusion_csv(path, confusion, classes) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *classes])
        for name, row in zip(classes, confusion):
            w.writerow([name, *map(int, row)])


def cmd_eval(cfg) -> int:
    _require(cfg, "checkpoint", "manifest")
    out = _run_dir(cfg)
    summary = evaluate_run(cfg, out)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    text = (f"scheme {summary['scheme']}, {summary['n_folds']} fold(s)\n"
            f"WA {summary['wa_mean']:.2f} +- {summary['wa_std']:.2f}%\n"
            f"UA {summary['ua_mean']:.2f} +- {summary['ua_std']:.2f}%\n")
    (out / "summary.txt").write_text(text)
    _write_confusion_csv(out / "confusion.csv", summary["confusion"], summary["classes"])
    from .plotting import plot_confusion
    plot_confusion(summary["confusion"], summary["classes"], out / "confusion.png",
                   title=f"UA {summary['ua_mean']:.1f}%")
    print(text, end="")
    return EXIT_OK


def _point_name(param: str, value) -> str:
    return f"{param}_{value}"


def run_sweep_point(cfg_values: dict, param: str, value, point_path: str) -> dict:
    """Train and evaluate one grid point in isolation; result also lands in ``point_path``."""
    cfg = config_mod.RunConfig(**cfg_values)
    point_dir = Path(point_path).with_suffix("")
    point_dir.mkdir(parents=True, exist_ok=True)
    aux_ids = None
    if param == "aux_speakers":
        n = int(value)
        if n == 0:
            cfg = replace(cfg, mode="mtl")
        else:
            cfg = replace(cfg, mode="mtl-aux")
            aux_records = load_manifest(cfg.aux_manifest)
            keep = sorted({r.speaker_id for r in aux_records})[:n]
            if len(keep) < n:
                raise ConfigError(f"aux manifest has only {len(keep)} speakers, sweep asks for {n}")
            aux_ids = [r.utterance_id for r in aux_records if r.speaker_id in set(keep)]
    else:
        cfg = replace(cfg, **{param: float(value)})
    cfg = replace(cfg, out=str(point_dir))
    cfg.validate()
    cfg.write(point_dir / "config.resolved")
    _train_folds(cfg, point_dir, aux_ids)
    cfg_eval = replace(cfg, checkpoint=str(point_dir))
    eval_dir = point_dir / "eval"
    eval_dir.mkdir(exist_ok=True)
    summary = evaluate_run(cfg_eval, eval_dir)
    result = {"param": param, "value": value, **{k: summary[k] for k in
                                                  ("ua_mean", "ua_std", "wa_mean", "wa_std", "n_folds")}}
    Path(point_path).write_text(json.dumps(result, indent=1, sort_keys=True))
    return result


def cmd_sweep(cfg) -> int:
    _require(cfg, "manifest")
    if cfg.sweep_param == "aux_speakers":
        _require(cfg, "aux_manifest")
    out = _run_dir(cfg)
    kind = int if cfg.sweep_param == "aux_speakers" else float
    try:
        values = [kind(v) for v in cfg.sweep_values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"sweep_values must be a comma list of numbers: {cfg.sweep_values!r}") from None
    if not values:
        raise ConfigError("sweep_values is empty")
    points = out / "points"
    points.mkdir(exist_ok=True)
    todo = [(v, points / f"{_point_name(cfg.sweep_param, v)}.json") for v in values]
    pending = [(v, p) for v, p in todo if not p.exists()]
    for v, p in todo:
        if p.exists():
            print(f"{cfg.sweep_param}={v}: already done, skipping")
    workers = min(worker_cap(), max(1, len(pending)))
    args = [(asdict(cfg), cfg.sweep_param, v, str(p)) for v, p in pending]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for res in pool.map(run_sweep_point, *zip(*args)):
                print(f"{cfg.sweep_param}={res['value']}: UA {res['ua_mean']:.2f}%")
    else:
        for a in args:
            res = run_sweep_point(*a)
            print(f"{cfg.sweep_param}={res['value']}: UA {res['ua_mean']:.2f}%")
    rows = [json.loads(p.read_text()) for _, p in todo]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "value", "ua_mean", "ua_std", "wa_mean", "wa_std", "n_folds"])
        for r in rows:
            w.writerow([r["param"], r["value"], f"{r['ua_mean']:.4f}", f"{r['ua_std']:.4f}",
                        f"{r['wa_mean']:.4f}", f"{r['wa_std']:.4f}", r["n_folds"]])
    from .plotting import plot_sweep
    plot_sweep([r["value"] for r in rows], [r["ua_mean"] for r in rows], out / "sweep.png",
               yerr=[r["ua_std"] for r in rows], xlabel=cfg.sweep_param)
    if cfg.sweep_param == "aux_speakers":
        ua = [r["ua_mean"] for r in rows]
        deltas = [b - a for a, b in zip(ua, ua[1:])]
        diag = {"counts": values, "ua": ua, "deltas": deltas,
                "non_decreasing": all(d >= 0 for d in deltas)}
        (out / "monotonicity.json").write_text(json.dumps(diag, indent=1))
        print(f"UA non-decreasing in aux speaker count: {diag['non_decreasing']}")
    return EXIT_OK


def cmd_verify(cfg) -> int:
    _require(cfg, "checkpoint", "enrol_manifest", "trial_manifest")
    for key in ("checkpoint", "enrol_manifest", "trial_manifest"):
        if not Path(getattr(cfg, key)).is_file():
            raise UsageError(f"{key} {getattr(cfg, key)!r} does not exist")
    out = _run_dir(cfg)
    model, normalizer = load_trained(cfg.checkpoint)
    if "speaker" not in model.heads:
        raise ConfigError("verification needs a checkpoint with a speaker head (mode mtl or mtl-aux)")
    enrol_corpus = _corpus(cfg.enrol_manifest, cfg)
    trial_corpus = _corpus(cfg.trial_manifest, cfg)
    enrol_vecs = utterance_dvectors(model, normalizer, enrol_corpus, enrol_corpus.select(
        [r.utterance_id for r in enrol_corpus.records]))
    trial_vecs = utterance_dvectors(model, normalizer, trial_corpus, trial_corpus.select(
        [r.utterance_id for r in trial_corpus.records]))
    if Path(cfg.enrol_manifest).resolve() == Path(cfg.trial_manifest).resolve():
        enrol, trials = split_enrolment(enrol_vecs, cfg.enrol_count)
    else:
        enrol = enrol_vecs
        trials = [(spk, v) for spk, vs in sorted(trial_vecs.items()) for v in vs]
    report, genuine, impostor = verification_protocol(enrol, trials, cfg.enrol_count, return_scores=True)
    thresholds = np.unique(np.concatenate([genuine, impostor]))
    far, frr = error_rates(genuine, impostor, thresholds)
    with open(out / "far_frr.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "far", "frr"])
        for t, a, r in zip(thresholds, far, frr):
            w.writerow([f"{t:.6f}", f"{a:.6f}", f"{r:.6f}"])
    (out / "verify.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    text = (f"EER {report.eer:.2f}% at cosine threshold {report.threshold:.4f}\n"
            f"{len(report.speakers)} enrolled speakers, {report.n_genuine} genuine and "
            f"{report.n_impostor} impostor trials\n")
    if report.excluded:
        text += f"excluded (too few enrolment utterances): {', '.join(report.excluded)}\n"
    (out / "verify.txt").write_text(text)
    from .plotting import plot_far_frr
    plot_far_frr(thresholds, far, frr, out / "far_frr.png", report.threshold)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train,
            "eval": cmd_eval, "sweep": cmd_sweep, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtaae", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run directory")
    p.add_argument("--mode", choices=["stl", "mtl", "mtl-aux"])
    p.add_argument("--scheme", choices=["tenfold", "loso"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--precision", choices=["f32", "f64"])
    p.add_argument("--manifest")
    p.add_argument("--aux-manifest", dest="aux_manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--enrol-manifest", dest="enrol_manifest")
    p.add_argument("--trial-manifest", dest="trial_manifest")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


FLAG_KEYS = ("seed", "out", "mode", "scheme", "alpha", "beta", "precision", "manifest",
             "aux_manifest", "checkpoint", "enrol_manifest", "trial_manifest")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v
        overrides.update({k: getattr(args, k) for k in FLAG_KEYS if getattr(args, k) is not None})
        cfg = config_mod.resolve(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigError) as exc:
        print(f"mtaae {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, NonFiniteError, KeyError) as exc:
        print(f"mtaae {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
