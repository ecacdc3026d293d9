"""Command-line entry point: ``spkdino {synth,train,finetune,eval,analyze,ablate}``.

Exit status is 0 on success, 2 on usage or configuration errors and 1 when a
run fails.  Every command that produces a run directory writes the resolved
configuration there as ``config.txt``; feeding that file back with
``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import logging
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import plotting, trainer
from .config import ConfigError, RunConfig
from .corpus import AudioCache, Manifest, ManifestEntry, write_wav

log = logging.getLogger("spkdino")


class UsageError(Exception):
    pass


# -- config resolution --------------------------------------------------------

def _resolve_config(args, seed_key: str | None, epochs_key: str | None = None,
                    base: RunConfig | None = None) -> RunConfig:
    """Config file (or ``base``), then --override pairs, then the dedicated flags."""
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    else:
        cfg = base if base is not None else RunConfig()
    overrides = list(args.override or [])
    if seed_key and args.seed is not None:
        overrides.append(f"{seed_key}={args.seed}")
    if epochs_key and getattr(args, "epochs", None) is not None:
        overrides.append(f"{epochs_key}={args.epochs}")
    return cfg.with_overrides(overrides).validate()


def _write_tsv(path, header, rows):
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_cell(v) for v in row) + "\n")


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# -- commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve_config(args, "corpus.seed")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    for name, manifest in (("train", cfg.train_manifest()), ("eval", cfg.eval_manifest())):
        if args.wav:
            audio = AudioCache(manifest)
            wav_dir = out / "wav" / name
            wav_dir.mkdir(parents=True, exist_ok=True)
            entries = []
            for e in manifest:
                path = wav_dir / f"{e.utterance_id}.wav"
                write_wav(path, audio(e.utterance_id))
                entries.append(ManifestEntry(e.utterance_id, e.speaker_id, f"wav:{path.resolve()}"))
            manifest = Manifest(entries)
        manifest.save(out / f"{name}_manifest.tsv")
        print(f"{name}\t{len(manifest)} utterances\t{len(manifest.speakers())} speakers")
    return 0


def cmd_train(args) -> int:
    base = None
    if args.resume and not args.config:
        _, meta = _checkpoint_meta(args.resume)
        base = RunConfig.loads(meta["config"])
    cfg = _resolve_config(args, "train.seed", "train.epochs", base)
    result = trainer.train(cfg, args.out, resume=args.resume)
    print(f"checkpoint\t{result.checkpoint}\nlog\t{result.log_path}\nsteps\t{result.steps}")
    return 0


def cmd_finetune(args) -> int:
    if bool(args.checkpoint) == bool(args.random_init):
        raise UsageError("finetune needs exactly one of --checkpoint or --random-init")
    base = None
    if args.checkpoint and not args.config:
        _, meta = _checkpoint_meta(args.checkpoint)
        base = RunConfig.loads(meta["config"])
    cfg = _resolve_config(args, "train.seed", "finetune.epochs", base)
    labeled = trainer.labeled_subset(cfg.train_manifest(), cfg.finetune.label_fraction)
    result = trainer.finetune(cfg, args.checkpoint, labeled, args.out)
    print(f"checkpoint\t{result.checkpoint}\nlabeled\t{len(labeled)}\nsteps\t{result.steps}")
    return 0


def cmd_eval(args) -> int:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"eval.trial_seed={args.seed}")
    manifest = Manifest.load(args.manifest) if args.manifest else None
    trials = ev.load_trials(args.trials) if args.trials else None
    report, trials, raw, normed = ev.evaluate(args.checkpoint, trials, manifest, overrides=overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, _, _, cfg = ev.load_model(args.checkpoint)
    cfg.with_overrides(overrides).save(out / "config.txt")
    ev.save_trials(out / "trials.txt", trials)
    ev.save_scores(out / "scores.txt", trials, raw)
    if normed is not None:
        ev.save_scores(out / "scores_asnorm.txt", trials, normed)
    text = ev.format_report(report)
    (out / "report.tsv").write_text(text)
    plotting.score_histogram(out / "scores.png", raw, [t.target for t in trials], normed)
    sys.stdout.write(text)
    return 0


def cmd_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        _, meta = _checkpoint_meta(args.checkpoint)
        cfg = RunConfig.loads(meta["config"])
        summary = ev.collapse_report(args.checkpoint, probe=cfg.train_manifest())
    else:
        if not args.log:
            raise UsageError("analyze needs a training log or --checkpoint")
        logd = trainer.read_log(args.log)
        if logd["step"].size == 0:
            raise UsageError(f"{args.log} holds no training steps")
        summary = ev.collapse_report(args.log, tail=args.tail)
        summary.update(_schedule_summary(logd, summary["log_k"]))
        _write_tsv(out / "series.tsv", trainer.LOG_COLUMNS,
                   zip(*(logd[c] for c in trainer.LOG_COLUMNS)))
        plotting.training_curves(out / "curves.png", logd)
    rows = list(summary.items())
    _write_tsv(out / "summary.tsv", ("key", "value"), rows)
    for k, v in rows:
        print(f"{k}\t{_cell(v)}")
    if summary["collapsed"]:
        print("WARNING\tteacher output has collapsed", file=sys.stderr)
    return 0


def _schedule_summary(logd, log_k) -> dict:
    tau = logd["tau_t"]
    warm_end = int(logd["step"][np.argmax(tau >= tau[-1])])
    post = logd["entropy"][logd["step"] > warm_end]
    lo, hi = 0.05 * log_k, 0.95 * log_k
    return {
        "steps": int(logd["step"][-1]),
        "lr_first": float(logd["lr"][0]),
        "lr_last": float(logd["lr"][-1]),
        "lambda_first": float(logd["lambda"][0]),
        "lambda_last": float(logd["lambda"][-1]),
        "tau_t_first": float(tau[0]),
        "tau_t_last": float(tau[-1]),
        "tau_t_warm_end_step": warm_end,
        "post_warm_entropy_min": float(post.min()) if post.size else math.nan,
        "post_warm_entropy_max": float(post.max()) if post.size else math.nan,
        "post_warm_in_band": bool(post.size and lo < post.min() and post.max() < hi),
    }


# -- ablation sweeps ----------------------------------------------------------------

def parse_sweep(text: str) -> list[tuple[str, list[str]]]:
    """Blocks of ``key = value`` lines, each headed by ``[name]``."""
    blocks = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            blocks.append((line[1:-1].strip(), []))
        elif not blocks:
            raise UsageError(f"sweep line {lineno}: override before the first [name] header")
        elif "=" not in line:
            raise UsageError(f"sweep line {lineno}: expected key = value")
        else:
            k, v = line.split("=", 1)
            blocks[-1][1].append(f"{k.strip()}={v.strip()}")
    names = [n for n, _ in blocks]
    if not blocks:
        raise UsageError("sweep defines no runs")
    if len(set(names)) != len(names) or not all(names):
        raise UsageError("sweep run names must be unique and non-empty")
    return blocks


def preset_sweep(name: str, cfg: RunConfig) -> list[tuple[str, list[str]]]:
    if name == "augmentation":
        return [
            ("none", ["aug.p_noise_reverb=0", "aug.p_tempo=0", "aug.p_pitch=0"]),
            ("A+R", ["aug.p_noise_reverb=1", "aug.p_tempo=0", "aug.p_pitch=0"]),
            ("A+R+T", ["aug.p_noise_reverb=1", "aug.p_tempo=0.5", "aug.p_pitch=0"]),
            ("A+R+P", ["aug.p_noise_reverb=1", "aug.p_tempo=0", "aug.p_pitch=0.5",
                       "aug.pitch_cents=-200,200"]),
            ("A+R+Phat", ["aug.p_noise_reverb=1", "aug.p_tempo=0", "aug.p_pitch=0.5",
                          "aug.pitch_cents=200"]),
        ]
    if name == "views":
        return [(f"L{n_long}M{n_short}", [f"plan.n_long={n_long}", f"plan.n_short={n_short}"])
                for n_long, n_short in ((1, 1), (1, 2), (2, 4))]
    if name == "corpus":
        s, u = cfg.corpus.n_speakers, cfg.corpus.utts_per_speaker
        grid = (("all", s, u), ("spk_half", s // 2, u), ("utt_half", s, u // 2),
                ("spk_quarter", s // 4, u), ("utt_quarter", s, u // 4))
        return [(n, [f"corpus.n_speakers={max(2, a)}", f"corpus.utts_per_speaker={max(2, b)}"])
                for n, a, b in grid]
    raise UsageError(f"unknown preset {name!r}")


COMPARISON_COLUMNS = ("run", "eer_percent", "min_dcf", "asnorm_eer_percent", "nmi_top1",
                      "pseudo_speakers_top1", "pseudo_speakers_top2", "collapsed", "overrides")


def cmd_ablate(args) -> int:
    base = _resolve_config(args, "train.seed", "train.epochs")
    if bool(args.sweep) == bool(args.preset):
        raise UsageError("ablate needs exactly one of --sweep or --preset")
    blocks = parse_sweep(Path(args.sweep).read_text()) if args.sweep else preset_sweep(args.preset, base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # validate every block before spending time on the first run
    configs = [(name, over, base.with_overrides(over).validate()) for name, over in blocks]
    rows = []
    for name, over, cfg in configs:
        run_dir = out / _safe_name(name)
        log.info("ablation run %s: %s", name, " ".join(over) or "(base)")
        result = trainer.train(cfg, run_dir)
        report, trials, raw, normed = ev.evaluate(result.checkpoint)
        (run_dir / "report.tsv").write_text(ev.format_report(report))
        ev.save_scores(run_dir / "scores.txt", trials, raw)
        rows.append([name] + [report.get(c, "") for c in COMPARISON_COLUMNS[1:-1]] + [" ".join(over)])
    _write_tsv(out / "comparison.tsv", COMPARISON_COLUMNS, rows)
    plotting.ablation_bars(out / "comparison.png", [r[0] for r in rows], [r[1] for r in rows])
    print((out / "comparison.tsv").read_text(), end="")
    return 0


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9+._-]", "_", name)


def _checkpoint_meta(path):
    from .net import load_checkpoint
    return load_checkpoint(path)


# -- argument parsing ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spkdino", description=__doc__.split("\n", 1)[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, epochs=False, config=True):
        if config:
            p.add_argument("--config", help="config file (key = value lines)")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="config override, repeatable; wins over --config")
        if seed:
            p.add_argument("--seed", type=int)
        if epochs:
            p.add_argument("--epochs", type=int)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="generate the synthetic corpus manifests")
    common(p)
    p.add_argument("--wav", action="store_true", help="also render every utterance to 16-bit WAV")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="self-supervised pretraining")
    common(p, epochs=True)
    p.add_argument("--resume", metavar="CKPT", help="continue from a training checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="supervised AAM fine-tuning on a labeled subset")
    common(p, epochs=True)
    p.add_argument("--checkpoint", help="pretrained checkpoint to start from")
    p.add_argument("--random-init", action="store_true", help="start from a random encoder")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="score verification trials and write a report")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trials", help="trial list: label enroll test per line")
    p.add_argument("--manifest", help="manifest holding the trial utterances")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="collapse and schedule summary of a training run")
    p.add_argument("log", nargs="?", help="train.log written by the train command")
    p.add_argument("--checkpoint", help="measure collapse on the training corpus instead")
    p.add_argument("--tail", type=float, default=0.1, help="fraction of final steps to average")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="sequential runs over a sweep and a comparison table")
    common(p, epochs=True)
    p.add_argument("--sweep", help="file of [name] blocks with key = value overrides")
    p.add_argument("--preset", choices=("augmentation", "views", "corpus"))
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"spkdino {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError, FloatingPointError, KeyError) as exc:
        print(f"spkdino {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
