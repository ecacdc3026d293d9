"""Speaker-verification scoring and analysis: embeddings, cosine / AS-norm
scores, EER, minDCF, pseudo-label NMI and collapse diagnostics."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import net
from .config import RunConfig
from .corpus import AudioCache, CorpusError, Manifest
from .dino import entropy, sharpen

SIGMA_FLOOR = 1e-6
COS_EPS = 1e-12


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    target: bool


# -- trials & score files ----------------------------------------------------

def make_trials(manifest: Manifest, seed: int = 0) -> list[Trial]:
    """All same-speaker pairs as targets plus as many random cross-speaker pairs."""
    by_spk = {}
    for e in manifest:
        by_spk.setdefault(e.speaker_id, []).append(e.utterance_id)
    targets = [Trial(a, b, True) for utts in by_spk.values()
               for a, b in itertools.combinations(utts, 2)]
    ids = manifest.utterance_ids
    spk = manifest.labels()
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x7A])
    seen = set()
    nontargets = []
    n_cross = sum(1 for a, b in itertools.combinations(ids, 2) if spk[a] != spk[b])
    want = min(len(targets), n_cross)
    while len(nontargets) < want:
        i, j = rng.integers(len(ids), size=2)
        a, b = ids[min(i, j)], ids[max(i, j)]
        if spk[a] == spk[b] or (a, b) in seen:
            continue
        seen.add((a, b))
        nontargets.append(Trial(a, b, False))
    return targets + nontargets


def save_trials(path, trials) -> None:
    Path(path).write_text("".join(f"{int(t.target)} {t.enroll} {t.test}\n" for t in trials))


def load_trials(path) -> list[Trial]:
    trials = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise EvalError(f"trial line {lineno}: expected 'label enroll test'")
        trials.append(Trial(parts[1], parts[2], parts[0] == "1"))
    return trials


def save_scores(path, trials, scores) -> None:
    Path(path).write_text("".join(f"{t.enroll} {t.test} {float(s)!r}\n" for t, s in zip(trials, scores)))


def load_scores(path) -> list[tuple[str, str, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            a, b, s = line.split()
            out.append((a, b, float(s)))
    return out


# -- embeddings ---------------------------------------------------------------

def load_model(checkpoint, group: str = "student"):
    groups, meta = net.load_checkpoint(checkpoint)
    if group not in groups:
        raise EvalError(f"{checkpoint} has no {group} parameters")
    cfg = RunConfig.loads(meta["config"])
    return groups, meta, net.model_config_from_dict(meta["model"]), cfg


def _whole_features(audio, utt_ids, cfg: RunConfig):
    from .trainer import featurize
    by_len = {}
    for u in utt_ids:
        by_len.setdefault(len(audio(u)), []).append(u)
    for _, group in sorted(by_len.items()):
        for i in range(0, len(group), 64):
            part = group[i:i + 64]
            yield part, featurize([audio(u) for u in part], cfg)


def _resolver(manifest, audio):
    audio = AudioCache(manifest) if audio is None else audio
    missing = []
    for u in manifest.utterance_ids:
        try:
            audio(u)
        except (CorpusError, OSError, KeyError):
            missing.append(u)
    if missing:
        raise EvalError(f"unresolvable utterances: {', '.join(missing)}")
    return audio


def extract_embeddings(checkpoint, manifest: Manifest, audio=None, group: str = "student") -> dict:
    """Whole-utterance embeddings from the student encoder (no cropping or augmentation)."""
    groups, _, mcfg, cfg = load_model(checkpoint, group)
    audio = _resolver(manifest, audio)
    params = groups[group]
    out = {}
    for part, feats in _whole_features(audio, manifest.utterance_ids, cfg):
        emb, _ = net.encoder_forward(params, feats, mcfg)
        out.update(zip(part, emb))
    return {u: out[u] for u in manifest.utterance_ids}


def teacher_distributions(checkpoint, manifest: Manifest, audio=None) -> dict:
    """Centered, sharpened teacher output for every whole utterance."""
    groups, meta, mcfg, cfg = load_model(checkpoint, "teacher")
    audio = _resolver(manifest, audio)
    center = groups["dino"]["center"] if meta.get("centering", True) else 0.0
    out = {}
    for part, feats in _whole_features(audio, manifest.utterance_ids, cfg):
        q, _ = net.forward(groups["teacher"], feats, mcfg)
        out.update(zip(part, sharpen(q - center, meta["tau_t"])))
    return {u: out[u] for u in manifest.utterance_ids}


# -- scoring --------------------------------------------------------------------

def cosine_score(e1, e2) -> float:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    n = max(np.linalg.norm(e1), COS_EPS) * max(np.linalg.norm(e2), COS_EPS)
    return float(np.clip(np.dot(e1, e2) / n, -1.0, 1.0))


def _unit(x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), COS_EPS)


def score_trials(embeddings: dict, trials) -> np.ndarray:
    return np.array([cosine_score(embeddings[t.enroll], embeddings[t.test]) for t in trials])


def _top_stats(vectors, cohort, top_n):
    s = _unit(vectors) @ _unit(cohort).T
    top = -np.sort(-s, axis=1)[:, :top_n]
    mu = top.mean(axis=1)
    sd = top.std(axis=1)
    if np.any(sd < SIGMA_FLOOR):
        warnings.warn("degenerate AS-norm cohort: standard deviation floored", RuntimeWarning,
                      stacklevel=3)
    return mu, np.maximum(sd, SIGMA_FLOOR)


def as_norm(scores, enroll_embeddings, test_embeddings, cohort, top_n: int) -> np.ndarray:
    """Adaptive symmetric score normalization.

    Row ``i`` of the enroll/test embedding arrays belongs to ``scores[i]``.
    Each side is normalized by the mean and std of its ``top_n`` highest
    cosine scores against the cohort.
    """
    cohort = np.atleast_2d(cohort)
    if not 2 <= top_n <= cohort.shape[0]:
        raise EvalError(f"need 2 <= top_n <= cohort size, got top_n={top_n}, cohort={cohort.shape[0]}")
    s = np.asarray(scores, dtype=np.float64)
    mu_e, sd_e = _top_stats(enroll_embeddings, cohort, top_n)
    mu_t, sd_t = _top_stats(test_embeddings, cohort, top_n)
    return 0.5 * ((s - mu_e) / sd_e + (s - mu_t) / sd_t)


# -- metrics --------------------------------------------------------------------

def _check_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise EvalError("scores and labels must be equal-length sequences")
    if y.all() or not y.any():
        raise EvalError("need both target and non-target trials")
    if not np.all(np.isfinite(s)):
        raise EvalError("scores must be finite")
    return s, y


def operating_points(scores, labels):
    """(thresholds, P_fa, P_miss) for accept-if-score >= threshold.

    Thresholds are -inf, the midpoints between distinct scores, and +inf.
    """
    s, y = _check_labels(scores, labels)
    u = np.unique(s)
    thr = np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])
    tar = np.sort(s[y])
    non = np.sort(s[~y])
    p_miss = np.searchsorted(tar, thr, side="left") / tar.size
    p_fa = 1.0 - np.searchsorted(non, thr, side="left") / non.size
    return thr, p_fa, p_miss


def eer(scores, labels) -> tuple[float, float]:
    """Equal error rate on the ROC convex hull, with the crossing threshold.

    The hull is taken over all threshold operating points; the EER is where its
    segment crosses P_fa = P_miss, by linear interpolation between the two hull
    points that bracket the crossing.
    """
    thr, p_fa, p_miss = operating_points(scores, labels)
    # points run from (1, 0) to (0, 1); lower convex hull in the (P_fa, P_miss) plane
    pts = sorted(zip(p_fa, p_miss, range(len(thr))))
    hull = []
    for p in pts:
        while len(hull) >= 2:
            (x1, y1, _), (x2, y2, _) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    # hull is ordered by increasing P_fa, so P_miss - P_fa decreases along it
    for (x1, y1, i1), (x2, y2, i2) in zip(hull, hull[1:]):
        d1, d2 = y1 - x1, y2 - x2
        if d1 >= 0 >= d2:
            if d1 == d2:
                return float(x1), float(thr[i1])
            a = d1 / (d1 - d2)
            rate = x1 + a * (x2 - x1)
            t1, t2 = thr[i1], thr[i2]
            s = np.asarray(scores, dtype=float)
            t1 = s.max() if np.isinf(t1) and t1 > 0 else (s.min() if np.isinf(t1) else t1)
            t2 = s.max() if np.isinf(t2) and t2 > 0 else (s.min() if np.isinf(t2) else t2)
            return float(rate), float(t1 + a * (t2 - t1))
    raise EvalError("ROC hull never crosses the diagonal")  # unreachable for valid input


def min_dcf(scores, labels, p_target: float = 0.05, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    _, p_fa, p_miss = operating_points(scores, labels)
    cost = c_miss * p_miss * p_target + c_fa * p_fa * (1.0 - p_target)
    return float(cost.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))


def nmi(labels_a, labels_b, average: str = "arithmetic") -> float:
    a = list(labels_a)
    b = list(labels_b)
    if len(a) != len(b):
        raise EvalError("label sequences differ in length")
    if not a:
        raise EvalError("empty label sequences")
    _, ia = np.unique(np.array([repr(x) for x in a]), return_inverse=True)
    _, ib = np.unique(np.array([repr(x) for x in b]), return_inverse=True)
    n = len(a)
    joint = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(joint, (ia, ib), 1.0)
    pj = joint / n
    pa, pb = pj.sum(axis=1), pj.sum(axis=0)
    h_a = -np.sum(pa * np.log(pa))
    h_b = -np.sum(pb * np.log(pb))
    nz = pj > 0
    mi = float(np.sum(pj[nz] * np.log(pj[nz] / np.outer(pa, pb)[nz])))
    if h_a <= 0 or h_b <= 0:
        # a single-cluster labeling carries no information; two of them agree trivially
        return 1.0 if h_a <= 0 and h_b <= 0 else 0.0
    if average == "arithmetic":
        denom = 0.5 * (h_a + h_b)
    elif average == "geometric":
        denom = math.sqrt(h_a * h_b)
    elif average == "max":
        denom = max(h_a, h_b)
    else:
        raise EvalError(f"unknown NMI normalization {average!r}")
    return float(min(max(mi / denom, 0.0), 1.0))


# -- DINO output analysis -----------------------------------------------------

def top_labels(p, top: int = 1):
    """Argmax index, or the unordered pair of the two largest indices (ties -> lower index)."""
    p = np.asarray(p)
    order = np.argsort(-p, kind="stable")
    if top == 1:
        return int(order[0])
    if top == 2:
        return tuple(sorted((int(order[0]), int(order[1]))))
    raise EvalError("top must be 1 or 2")


def pseudo_labels(checkpoint, manifest: Manifest, top: int = 1, audio=None):
    """Pseudo speaker labels from the teacher; returns (labels, distinct count)."""
    dists = teacher_distributions(checkpoint, manifest, audio)
    labels = {u: top_labels(p, top) for u, p in dists.items()}
    return labels, len(set(labels.values()))


def collapse_metrics(p) -> dict:
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if p.shape[0] == 0:
        raise EvalError("empty probe batch")
    k = p.shape[1]
    h = entropy(p)
    counts = np.bincount(p.argmax(axis=1), minlength=k)
    return {
        "entropy": float(h.mean()),
        "max_dim_frequency": float(counts.max() / p.shape[0]),
        "kl_uniform": float(np.mean(math.log(k) - h)),
        "log_k": math.log(k),
    }


def is_collapsed(metrics: dict) -> bool:
    return metrics["max_dim_frequency"] > 0.9 or metrics["entropy"] > 0.99 * metrics["log_k"]


def collapse_report(source, probe: Manifest | None = None, audio=None, tail: float = 0.1) -> dict:
    """Collapse diagnostics from a checkpoint + probe manifest, from a training-log
    path, or directly from an array of teacher distributions."""
    if isinstance(source, np.ndarray):
        m = collapse_metrics(source)
    elif str(source).endswith(".log"):
        from .trainer import read_log
        logd = read_log(source)
        n = logd["step"].size
        if n == 0:
            raise EvalError(f"{source}: empty training log")
        window = slice(n - max(1, int(round(tail * n))), n)
        log_k = math.log(int(logd["meta"]["out_dim"]))
        h = float(logd["entropy"][window].mean())
        m = {"entropy": h, "max_dim_frequency": float(logd["top_freq"][window].mean()),
             "kl_uniform": log_k - h, "log_k": log_k}
    else:
        if probe is None or len(probe) == 0:
            raise EvalError("a checkpoint report needs a non-empty probe manifest")
        dists = teacher_distributions(source, probe, audio)
        m = collapse_metrics(np.stack(list(dists.values())))
    m["collapsed"] = is_collapsed(m)
    return m


# -- full evaluation ------------------------------------------------------------

def cohort_manifest(cfg: RunConfig, train_manifest: Manifest | None = None) -> Manifest:
    m = cfg.train_manifest() if train_manifest is None else train_manifest
    ids = m.utterance_ids
    step = max(1, len(ids) // max(1, cfg.eval.cohort_size))
    return m.subset(ids[::step][:cfg.eval.cohort_size])


def evaluate(checkpoint, trials=None, eval_manifest: Manifest | None = None,
             cohort: Manifest | None = None, audio=None, nmi_manifest: Manifest | None = None,
             overrides=()):
    """Score trials and compute the report dictionary.

    ``overrides`` ("key=value" strings) adjust the configuration stored in the
    checkpoint, e.g. ``eval.top_n``.  Returns ``(report, trials, raw_scores,
    normalized_scores)``.
    """
    _, meta, _, cfg = load_model(checkpoint)
    cfg = cfg.with_overrides(overrides)
    eval_manifest = cfg.eval_manifest() if eval_manifest is None else eval_manifest
    trials = make_trials(eval_manifest, cfg.eval.trial_seed) if trials is None else trials
    needed = {t.enroll for t in trials} | {t.test for t in trials}
    unknown = sorted(u for u in needed if u not in eval_manifest)
    if unknown:
        raise EvalError(f"trial utterances missing from manifest: {', '.join(unknown[:10])}")
    emb = extract_embeddings(checkpoint, eval_manifest.subset(
        u for u in eval_manifest.utterance_ids if u in needed), audio)
    raw = score_trials(emb, trials)
    labels = np.array([t.target for t in trials])
    rate, thr = eer(raw, labels)
    report = {
        "checkpoint": str(checkpoint),
        "trials": len(trials),
        "eer_percent": 100.0 * rate,
        "eer_threshold": thr,
        "min_dcf": min_dcf(raw, labels, cfg.eval.p_target),
        "p_target": cfg.eval.p_target,
    }
    normed = None
    cohort = cohort_manifest(cfg) if cohort is None else cohort
    if len(cohort) >= 2:
        top_n = min(cfg.eval.top_n, len(cohort))
        c_emb = extract_embeddings(checkpoint, cohort)
        c = np.stack(list(c_emb.values()))
        normed = as_norm(raw, np.stack([emb[t.enroll] for t in trials]),
                         np.stack([emb[t.test] for t in trials]), c, top_n)
        report["asnorm_eer_percent"] = 100.0 * eer(normed, labels)[0]
        report["asnorm_min_dcf"] = min_dcf(normed, labels, cfg.eval.p_target)
    if meta.get("kind") == "dino":
        probe = cfg.train_manifest() if nmi_manifest is None else nmi_manifest
        dists = teacher_distributions(checkpoint, probe)
        truth = [probe[u].speaker_id for u in dists]
        for top in (1, 2):
            pl = [top_labels(p, top) for p in dists.values()]
            report[f"nmi_top{top}"] = nmi(pl, truth, cfg.eval.nmi_average)
            report[f"pseudo_speakers_top{top}"] = len(set(pl))
        cm = collapse_metrics(np.stack(list(dists.values())))
        report.update({f"collapse_{k}": v for k, v in cm.items()})
        report["collapsed"] = is_collapsed(cm)
    return report, trials, raw, normed


def format_report(report: dict) -> str:
    lines = []
    for k, v in report.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        lines.append(f"{k}\t{v}")
    return "\n".join(lines) + "\n"
