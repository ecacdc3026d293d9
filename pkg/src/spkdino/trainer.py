"""Training loops: DINO pretraining and supervised AAM fine-tuning.

Every random draw is keyed by (seed, epoch, utterance index), so a run resumed
from any checkpoint follows the same trajectory as an uninterrupted one.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import net
from .augment import SegmentPlan, build_views, _segments
from .config import RunConfig
from .corpus import AudioCache, Manifest, Waveform
from .dino import ViewOutputs, center_and_update, dino_loss, ema_update, schedule_value
from .features import logmel_array

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss", "entropy", "lambda", "lr", "tau_t", "top_freq")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    steps: int


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed & 0xFFFFFFFF, epoch, 0xE0]).permutation(n)


def view_seed(seed: int, epoch: int, index: int) -> list:
    return [seed & 0xFFFFFFFF, epoch, index, 0x71]


def featurize(waves: list, cfg: RunConfig, dtype=np.float64) -> np.ndarray:
    f = cfg.features
    x = np.stack([w.samples for w in waves]).astype(dtype, copy=False)
    return logmel_array(x, waves[0].sample_rate, f.n_mels, f.win, f.hop)


def batch_views(audio, utt_ids, indices, epoch, cfg: RunConfig, aug, plan: SegmentPlan):
    """Long and short feature stacks for a batch, in utterance order.

    Returns arrays shaped (B*L, T_long, D) and (B*M, T_short, D) (or None when M = 0).
    """
    longs, shorts = [], []
    for idx in indices:
        views = build_views(audio(utt_ids[idx]), aug, plan, view_seed(cfg.train.seed, epoch, int(idx)))
        longs.extend(w for kind, w in views if kind == "long")
        shorts.extend(w for kind, w in views if kind == "short")
    dtype = np.dtype(cfg.train.precision)
    return (featurize(longs, cfg, dtype),
            featurize(shorts, cfg, dtype) if shorts else None)


def _checkpoint_groups(student, teacher, momentum, state):
    mom = {k: momentum.get(k, np.zeros_like(v)) for k, v in student.items()}
    return {"student": student, "teacher": teacher, "momentum": mom,
            "dino": {"center": state.center}}


def _log_line(values) -> str:
    step, rest = values[0], values[1:]
    return "\t".join([str(step)] + [repr(float(v)) for v in rest]) + "\n"


def read_log(path) -> dict:
    """Parse a training log into column arrays; ``out_dim`` comes from the header comment."""
    cols = {c: [] for c in LOG_COLUMNS}
    meta = {}
    header = None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            for part in line[1:].split():
                if "=" in part:
                    k, v = part.split("=", 1)
                    meta[k] = v
            continue
        fields = line.split("\t")
        if header is None:
            header = fields
            continue
        for name, value in zip(header, fields):
            if name in cols:
                cols[name].append(float(value))
    out = {k: np.asarray(v) for k, v in cols.items()}
    out["meta"] = meta
    return out


def initial_params(cfg: RunConfig, audio, utt_ids) -> dict:
    """Seeded random parameters, optionally refined by data-dependent init.

    The init batch is the leading ``plan.long_seconds`` of up to
    ``model.init_batch`` utterances spread evenly over ``utt_ids``, without
    augmentation.
    """
    mcfg = cfg.model_config()
    params = net.init_params(mcfg, cfg.train.seed)
    if not cfg.model.data_init:
        return params
    n = min(cfg.model.init_batch, len(utt_ids))
    picks = np.linspace(0, len(utt_ids) - 1, n).round().astype(int)
    want = None
    waves = []
    for i in picks:
        w = audio(utt_ids[i])
        want = want or int(round(cfg.plan.long_seconds * w.sample_rate))
        x = w.samples[:want]
        if len(x) < want:
            x = np.pad(x, (0, want - len(x)))
        waves.append(Waveform(x, w.sample_rate))
    return net.data_init(params, featurize(waves, cfg), mcfg)


def train(cfg: RunConfig, out_dir, resume=None, manifest: Manifest | None = None,
          audio=None) -> TrainResult:
    """DINO pretraining.  Writes ``train.log``, per-epoch checkpoints and ``final.ckpt``."""
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.txt")

    manifest = cfg.train_manifest() if manifest is None else manifest
    audio = AudioCache(manifest) if audio is None else audio
    utt_ids = manifest.utterance_ids
    if not utt_ids:
        raise TrainingError("empty training manifest")
    plan = cfg.segment_plan()
    mcfg = cfg.model_config()
    aug = cfg.augment_config(sample_rate=audio(utt_ids[0]).sample_rate)
    t = cfg.train
    spe = math.ceil(len(utt_ids) / t.batch_size)  # the last batch of an epoch may be short
    total = spe * t.epochs
    state = cfg.dino_state(total)

    if resume is None:
        student = initial_params(cfg, audio, utt_ids)
        teacher = net.copy_params(student)
        momentum = {}
    else:
        groups, meta = net.load_checkpoint(resume)
        if meta.get("kind") != "dino":
            raise TrainingError(f"{resume} is not a DINO checkpoint")
        student, teacher = groups["student"], groups["teacher"]
        momentum = groups["momentum"] if meta["step"] > 0 else {}
        state.center = groups["dino"]["center"]
        state.step = int(meta["step"])

    log_path = out_dir / "train.log"
    kept = []
    if resume is not None and log_path.exists():
        for line in log_path.read_text().splitlines(keepends=True):
            head = line.split("\t", 1)[0]
            if head.isdigit() and int(head) > state.step:
                break
            kept.append(line)
    if not kept:
        kept = [f"# out_dim={mcfg.out_dim} steps={total} steps_per_epoch={spe}\n",
                "\t".join(LOG_COLUMNS) + "\n"]
    n_long = plan.n_long
    dtype = np.dtype(t.precision)

    with open(log_path, "w") as log_fh:
        log_fh.writelines(kept)
        while state.step < total:
            step = state.step
            epoch, within = divmod(step, spe)
            order = epoch_order(len(utt_ids), t.seed, epoch)
            idx = order[within * t.batch_size:(within + 1) * t.batch_size]
            long_x, short_x = batch_views(audio, utt_ids, idx, epoch, cfg, aug, plan)
            b = len(idx)

            s_work = net.copy_params(student, dtype)
            q_long, cache_long = net.forward(s_work, long_x, mcfg)
            parts = [q_long.reshape(b, n_long, -1)]
            if short_x is not None:
                q_short, cache_short = net.forward(s_work, short_x, mcfg)
                parts.append(q_short.reshape(b, plan.n_short, -1))
            q_teacher, _ = net.forward(net.copy_params(teacher, dtype), long_x, mcfg)
            q_teacher = q_teacher.reshape(b, n_long, -1)
            student_q = np.concatenate(parts, axis=1)

            loss, grad, info = dino_loss(ViewOutputs(q_teacher, student_q), state)
            lr = schedule_value("lr", step, total, t.lr_start, t.lr_end)
            lam = state.ema_lambda
            tau_t = state.tau_t
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at step {step + 1}: lambda={lam} lr={lr} "
                    f"entropy={info['teacher_entropy']}")

            k = grad.shape[-1]
            grads = net.backward(s_work, cache_long, grad[:, :n_long].reshape(-1, k), mcfg)
            if short_x is not None:
                net.backward(s_work, cache_short, grad[:, n_long:].reshape(-1, k), mcfg, grads)
            grads = {name: g.astype(np.float64) for name, g in grads.items()}
            net.sgd_step(student, grads, lr, momentum, t.momentum)
            ema_update(student, teacher, lam)
            _, state = center_and_update(state, q_teacher)
            state.step = step + 1

            argmax = info["teacher_argmax"].ravel()
            top_freq = np.bincount(argmax).max() / argmax.size
            log_fh.write(_log_line((step + 1, loss, info["teacher_entropy"], lam, lr, tau_t, top_freq)))
            log_fh.flush()

            if state.step % spe == 0:
                done_epoch = state.step // spe
                log.info("epoch %d/%d loss %.4f entropy %.3f", done_epoch, t.epochs, loss,
                         info["teacher_entropy"])
                if t.checkpoint_every and done_epoch % t.checkpoint_every == 0:
                    save_dino_checkpoint(out_dir / "checkpoints" / f"epoch_{done_epoch:03d}.ckpt",
                                         cfg, student, teacher, momentum, state)

    final = out_dir / "final.ckpt"
    save_dino_checkpoint(final, cfg, student, teacher, momentum, state)
    return TrainResult(final, log_path, total)


def save_dino_checkpoint(path, cfg, student, teacher, momentum, state):
    meta = {
        "kind": "dino",
        "step": int(state.step),
        "total_steps": int(state.total_steps),
        "model": net.model_config_to_dict(cfg.model_config()),
        "config": cfg.dumps(),
        "tau_t": float(state.tau_t),
        "tau_s": float(state.tau_s),
        "centering": bool(state.centering),
    }
    net.save_checkpoint(path, _checkpoint_groups(student, teacher, momentum, state), meta)


# -- fine-tuning -----------------------------------------------------------

def labeled_subset(manifest: Manifest, fraction: float) -> Manifest:
    """The first ``ceil(fraction * n)`` utterances of every speaker."""
    by_spk = {}
    for e in manifest:
        by_spk.setdefault(e.speaker_id, []).append(e.utterance_id)
    keep = set()
    for utts in by_spk.values():
        keep.update(utts[:max(1, math.ceil(fraction * len(utts)))])
    return manifest.subset(u for u in manifest.utterance_ids if u in keep)


def whole_utterance_embeddings(params, mcfg, cfg: RunConfig, audio, utt_ids, chunk: int = 64):
    """Student-encoder embeddings of un-augmented, uncropped utterances."""
    out = {}
    by_len = {}
    for u in utt_ids:
        by_len.setdefault(len(audio(u)), []).append(u)
    for _, group in sorted(by_len.items()):
        for i in range(0, len(group), chunk):
            part = group[i:i + chunk]
            feats = featurize([audio(u) for u in part], cfg)
            emb, _ = net.encoder_forward(params, feats, mcfg)
            out.update(zip(part, emb))
    return {u: out[u] for u in utt_ids}


def finetune(cfg: RunConfig, pretrained, labeled: Manifest, out_dir, label_map: dict | None = None,
             audio=None) -> TrainResult:
    """Supervised AAM fine-tuning of the student encoder.

    ``pretrained`` is a DINO checkpoint path or None for a random encoder.
    Prototypes are initialized from class-mean embeddings, which keeps the
    run equivariant to any relabeling of classes.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.txt")
    ft = cfg.finetune
    mcfg = cfg.model_config()
    if len(labeled) == 0:
        raise TrainingError("empty labeled manifest")
    audio = AudioCache(labeled) if audio is None else audio

    if pretrained is None:
        params = initial_params(cfg, audio, labeled.utterance_ids)
    else:
        groups, meta = net.load_checkpoint(pretrained)
        params = groups["student"]
        mcfg = net.model_config_from_dict(meta["model"])
    encoder = {k: params[k].copy() for k in net.encoder_keys(params)}

    speakers = labeled.speakers()
    if label_map is None:
        label_map = {s: i for i, s in enumerate(speakers)}
    n_classes = len(set(label_map.values()))
    if set(label_map) != set(speakers) or sorted(set(label_map.values())) != list(range(n_classes)):
        raise TrainingError("label map does not cover the labeled speakers with classes 0..n-1")
    aam_cfg = net.AamConfig(ft.aam_margin, ft.aam_scale, n_classes)

    utt_ids = labeled.utterance_ids
    labels = np.array([label_map[labeled[u].speaker_id] for u in utt_ids])
    emb = whole_utterance_embeddings(encoder, mcfg, cfg, audio, utt_ids)
    e = np.stack([emb[u] for u in utt_ids])
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), net.L2_EPS)
    weight = np.zeros((n_classes, mcfg.embed_dim))
    np.add.at(weight, labels, e)
    weight += 1e-6  # keeps an all-zero class mean normalizable
    params = dict(encoder)
    params["aam.weight"] = weight

    aug = cfg.augment_config(sample_rate=audio(utt_ids[0]).sample_rate, perturb=False)
    spe = math.ceil(len(utt_ids) / ft.batch_size)
    total = spe * ft.epochs
    dtype = np.dtype(cfg.train.precision)
    momentum = {}
    log_path = out_dir / "finetune.log"
    with open(log_path, "w") as fh:
        fh.write("step\tloss\tlr\n")
        for step in range(total):
            epoch, within = divmod(step, spe)
            order = epoch_order(len(utt_ids), cfg.train.seed, epoch)
            idx = order[within * ft.batch_size:(within + 1) * ft.batch_size]
            segs = []
            for i in idx:
                rng = np.random.default_rng(view_seed(cfg.train.seed, epoch, int(i)))
                segs.extend(_segments(audio(utt_ids[i]), 1, ft.segment_seconds, aug, rng))
            feats = featurize(segs, cfg, dtype)
            enc_params = {k: params[k].astype(dtype) for k in encoder}
            e_b, cache = net.encoder_forward(enc_params, feats, mcfg)
            loss, d_e, d_w = net.aam_loss(e_b.astype(np.float64), labels[idx], params["aam.weight"], aam_cfg)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite AAM loss at step {step + 1}")
            grads = net.encoder_backward(enc_params, cache, d_e.astype(dtype), mcfg)
            grads = {name: g.astype(np.float64) for name, g in grads.items()}
            grads["aam.weight"] = d_w
            lr = schedule_value("lr", step, total, ft.lr_start, ft.lr_end)
            net.sgd_step(params, grads, lr, momentum, cfg.train.momentum)
            fh.write(f"{step + 1}\t{loss!r}\t{lr!r}\n")

    meta = {"kind": "aam", "step": total, "model": net.model_config_to_dict(mcfg),
            "config": cfg.dumps(), "n_classes": n_classes,
            "label_map": {k: int(v) for k, v in sorted(label_map.items())}}
    final = out_dir / "final.ckpt"
    net.save_checkpoint(final, {"student": encoder_only(params), "aam": {"weight": params["aam.weight"]}},
                        meta)
    return TrainResult(final, log_path, total)


def encoder_only(params) -> dict:
    return {k: params[k] for k in net.encoder_keys(params)}
