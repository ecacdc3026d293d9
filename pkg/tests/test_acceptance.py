"""End-to-end acceptance checks.

The training-based checks share a handful of full-size runs on the default
configuration (20 speakers x 50 utterances, 30 epochs); the whole module takes
about half an hour on one core.  Each check records a one-line verdict that is
printed in the terminal summary.
"""
import math
import time

import numpy as np
import pytest

from spkdino import cli, evaluate, net, trainer
from spkdino.augment import pitch_shift, tempo_stretch
from spkdino.config import RunConfig
from spkdino.corpus import AudioCache, Waveform
from spkdino.dino import DinoState, ViewOutputs, dino_loss, pair_count, schedule_value

import conftest
from oracles import (brute_as_norm, brute_eer, brute_min_dcf, brute_nmi, finite_difference,
                     rel_error)

SR = 16000


def verdict(n, ok, text):
    conftest.VERDICTS[n] = (bool(ok), text)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text}")
    assert ok, text


# -- shared runs ------------------------------------------------------------------

@pytest.fixture(scope="session")
def base_cfg():
    return RunConfig().validate()


@pytest.fixture(scope="session")
def corpus(base_cfg):
    m = base_cfg.train_manifest()
    return m, AudioCache(m)


@pytest.fixture(scope="session")
def eval_set(base_cfg):
    m = base_cfg.eval_manifest()
    return m, AudioCache(m), evaluate.make_trials(m, base_cfg.eval.trial_seed)


def _eer(params, cfg, eval_set):
    m, audio, trials = eval_set
    emb = trainer.whole_utterance_embeddings(params, cfg.model_config(), cfg, audio,
                                             m.utterance_ids)
    return evaluate.eer(evaluate.score_trials(emb, trials), [t.target for t in trials])[0]


def _train(tmp_path_factory, name, cfg, corpus):
    m, audio = corpus
    t0 = time.time()
    result = trainer.train(cfg, tmp_path_factory.mktemp(name), manifest=m, audio=audio)
    return result, time.time() - t0


@pytest.fixture(scope="session")
def ar_run(tmp_path_factory, base_cfg, corpus):
    cfg = base_cfg.with_overrides(["aug.p_noise_reverb=1.0"])
    return cfg, *_train(tmp_path_factory, "dino_ar", cfg, corpus)


@pytest.fixture(scope="session")
def plain_run(tmp_path_factory, base_cfg, corpus):
    cfg = base_cfg.with_overrides(["aug.p_noise_reverb=0"])
    return cfg, *_train(tmp_path_factory, "dino_plain", cfg, corpus)


@pytest.fixture(scope="session")
def collapse_run(tmp_path_factory, base_cfg, corpus):
    cfg = base_cfg.with_overrides(["dino.centering=false", f"dino.tau_t_start={base_cfg.dino.tau_s}",
                                   f"dino.tau_t_end={base_cfg.dino.tau_s}"]).validate()
    return cfg, *_train(tmp_path_factory, "dino_collapse", cfg, corpus)


def _student(checkpoint):
    groups, _ = net.load_checkpoint(checkpoint)
    return groups["student"]


# -- 1-3: gradients, loss structure, schedules ---------------------------------------

def test_criterion_01_gradients():
    t0 = time.time()
    cfg = net.ModelConfig(n_mels=5, channels=4, embed_dim=3, head_hidden=6, head_layers=2,
                          bottleneck=4, out_dim=7)
    rng = np.random.default_rng(2024)
    params = net.init_params(cfg, 11)
    for k in params:
        if k.endswith(".bias"):
            params[k] = 0.1 * rng.standard_normal(params[k].shape)
    x = rng.standard_normal((2, 22, cfg.n_mels))
    r = rng.standard_normal((2, cfg.out_dim))

    def loss():
        return float(np.sum(net.forward(params, x, cfg)[0] * r))

    q, cache = net.forward(params, x, cfg)
    grads = net.backward(params, cache, r, cfg)
    errors = {k: rel_error(grads[k], finite_difference(loss, params, k)) for k in params}

    aam = net.AamConfig(0.2, 30.0, 4)
    box = {"e": rng.standard_normal((3, cfg.embed_dim)), "w": rng.standard_normal((4, cfg.embed_dim))}
    y = np.array([1, 3, 0])
    _, de, dw = net.aam_loss(box["e"], y, box["w"], aam)

    def aam_loss():
        return net.aam_loss(box["e"], y, box["w"], aam)[0]

    errors["aam.embedding"] = rel_error(de, finite_difference(aam_loss, box, "e"))
    errors["aam.weight"] = rel_error(dw, finite_difference(aam_loss, box, "w"))
    worst = max(errors, key=errors.get)
    elapsed = time.time() - t0
    verdict(1, errors[worst] < 1e-4 and elapsed < 60,
            f"{len(errors)} tensors, worst rel. error {errors[worst]:.2e} ({worst}), {elapsed:.1f}s")


def test_criterion_02_loss_structure():
    rng = np.random.default_rng(0)
    k = 32
    counts_ok = True
    for n_long, n_short in ((1, 1), (1, 2), (2, 4)):
        out = ViewOutputs(rng.standard_normal((n_long, k)), rng.standard_normal((n_long + n_short, k)))
        _, _, info = dino_loss(out, DinoState.fresh(k))
        counts_ok &= info["pairs"] == n_long * (n_long + n_short - 1) == pair_count(n_long, n_long + n_short)
    uniform, _, _ = dino_loss(ViewOutputs(np.zeros((2, k)), np.zeros((6, k))), DinoState.fresh(k))
    uniform_err = abs(uniform - math.log(k))

    cfg = net.ModelConfig(n_mels=4, channels=3, embed_dim=3, head_hidden=4, bottleneck=3, out_dim=k)
    student, teacher = net.init_params(cfg, 0), net.init_params(cfg, 1)
    frozen = {n: v.copy() for n, v in teacher.items()}
    x = rng.standard_normal((1, 20, 4))
    views = rng.standard_normal((6, 20, 4))
    qs, cache = net.forward(student, views, cfg)
    qt, _ = net.forward(teacher, x, cfg)
    _, grad, _ = dino_loss(ViewOutputs(np.repeat(qt, 2, axis=0), qs), DinoState.fresh(k))
    grads = net.backward(student, cache, grad, cfg)
    net.sgd_step(student, grads, 0.1, {})
    teacher_still = all(np.array_equal(frozen[n], teacher[n]) for n in teacher)
    teacher_grad_free = set(grads) == set(student) and grad.shape == qs.shape
    verdict(2, counts_ok and uniform_err <= 1e-9 and teacher_still and teacher_grad_free,
            f"pair counts ok={counts_ok}, |uniform loss - log out_dim|={uniform_err:.1e}, "
            f"teacher untouched={teacher_still}")


def test_criterion_03_schedules(base_cfg):
    t = base_cfg.train
    total = 1000
    state = base_cfg.dino_state(total)
    lam = (schedule_value("lambda", 0, total, *state.lambda_schedule),
           schedule_value("lambda", total, total, *state.lambda_schedule))
    lr = (schedule_value("lr", 0, total, t.lr_start, t.lr_end),
          schedule_value("lr", total, total, t.lr_start, t.lr_end))
    taus = []
    for step in range(total + 1):
        state.step = step
        taus.append(state.tau_t)
    taus = np.array(taus)
    warm = int(0.2 * total)
    errs = [abs(lam[0] - 0.996), abs(lam[1] - 1.0), abs(lr[0] - t.lr_start), abs(lr[1] - t.lr_end),
            float(np.max(np.abs(taus[warm:] - 0.07))), abs(taus[0] - 0.04)]
    rising = bool(np.all(np.diff(taus[:warm + 1]) > 0))
    verdict(3, max(errs) <= 1e-12 and rising,
            f"lambda {lam[0]}->{lam[1]}, lr {lr[0]}->{lr[1]}, tau_t 0.07 from step {warm}/{total}, "
            f"max error {max(errs):.1e}")


# -- 4, 5, 8: separation, augmentation, pseudo labels --------------------------------

@pytest.mark.slow
def test_criterion_04_separation(ar_run, corpus, eval_set):
    cfg, result, seconds = ar_run
    m, audio = corpus
    untrained = _eer(trainer.initial_params(cfg, audio, m.utterance_ids), cfg, eval_set)
    trained = _eer(_student(result.checkpoint), cfg, eval_set)
    logd = trainer.read_log(result.log_path)
    log_k = math.log(cfg.model.out_dim)
    warm_end = math.ceil(cfg.dino.tau_t_warm * result.steps)
    post = logd["entropy"][logd["step"] > warm_end]
    lo, hi = 0.05 * log_k, 0.95 * log_k
    in_band = bool(post.size and lo < post.min() and post.max() < hi)
    verdict(4, trained < 0.20 and in_band,
            f"held-out EER {100 * trained:.2f}% (untrained {100 * untrained:.2f}%), post-warmup "
            f"entropy [{post.min():.3f}, {post.max():.3f}] within ({lo:.3f}, {hi:.3f}), "
            f"{result.steps} steps in {seconds / 60:.1f} min")


@pytest.mark.slow
def test_criterion_05_augmentation_helps(ar_run, plain_run, eval_set):
    ar = _eer(_student(ar_run[1].checkpoint), ar_run[0], eval_set)
    plain = _eer(_student(plain_run[1].checkpoint), plain_run[0], eval_set)
    verdict(5, ar < plain, f"EER with noise/reverb {100 * ar:.2f}% vs without {100 * plain:.2f}%")


@pytest.mark.slow
def test_criterion_08_pseudo_labels(ar_run, corpus):
    m, audio = corpus
    dists = evaluate.teacher_distributions(ar_run[1].checkpoint, m, audio)
    truth = [m[u].speaker_id for u in dists]
    top1 = [evaluate.top_labels(p, 1) for p in dists.values()]
    top2 = [evaluate.top_labels(p, 2) for p in dists.values()]
    score = evaluate.nmi(top1, truth)
    n1, n2 = len(set(top1)), len(set(top2))
    verdict(8, score > 0.5 and n2 > n1,
            f"NMI(top-1, speakers) {score:.3f}, distinct labels top-1 {n1} / top-2 {n2}, "
            f"{len(m.speakers())} true speakers")


# -- 6: collapse ablation -------------------------------------------------------------

@pytest.mark.slow
def test_criterion_06_collapse(collapse_run, tmp_path, capsys):
    cfg, result, _ = collapse_run
    rep = evaluate.collapse_report(result.log_path)
    code = cli.main(["analyze", str(result.log_path), "--out", str(tmp_path / "analyze")])
    flagged = code == 0 and "WARNING" in capsys.readouterr().err
    verdict(6, rep["collapsed"] and flagged,
            f"centering off, tau_t = tau_s = {cfg.dino.tau_s}: final entropy {rep['entropy']:.3f} "
            f"(threshold {0.99 * rep['log_k']:.3f}), max-dim frequency "
            f"{rep['max_dim_frequency']:.3f} (threshold 0.9), analyze flagged={flagged}")


# -- 7: metric oracles -----------------------------------------------------------------

def test_criterion_07_metric_oracles():
    rng = np.random.default_rng(7)
    worst = {"eer": 0.0, "min_dcf": 0.0, "nmi": 0.0, "as_norm": 0.0}
    for case in range(30):
        n = int(rng.integers(4, 21))
        y = np.zeros(n, dtype=bool)
        y[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = True
        s = np.round(rng.normal(size=n) + y, 1 if case % 2 else 6)
        worst["eer"] = max(worst["eer"], abs(evaluate.eer(s, y)[0] - brute_eer(s, y)))
        worst["min_dcf"] = max(worst["min_dcf"],
                               abs(evaluate.min_dcf(s, y, 0.05) - brute_min_dcf(s, y, 0.05)))
        a = rng.integers(0, 4, size=n).tolist()
        b = rng.integers(0, 3, size=n).tolist()
        worst["nmi"] = max(worst["nmi"], abs(evaluate.nmi(a, b) - brute_nmi(a, b)))
        d, c = 4, int(rng.integers(2, 21))
        e, t, cohort = rng.standard_normal((3, d)), rng.standard_normal((3, d)), rng.standard_normal((c, d))
        raw = np.array([evaluate.cosine_score(u, v) for u, v in zip(e, t)])
        top = int(rng.integers(2, c + 1))
        worst["as_norm"] = max(worst["as_norm"], float(np.max(np.abs(
            evaluate.as_norm(raw, e, t, cohort, top) - brute_as_norm(e, t, cohort, top)))))
    example = evaluate.eer([0.8, 0.6, 0.7, 0.1], [1, 1, 0, 0])[0]
    ok = max(worst.values()) <= 1e-9 and abs(example - 0.25) <= 1e-9
    verdict(7, ok, "max deviation from brute force: "
            + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# -- 9: DSP ------------------------------------------------------------------------------

def _peak(w):
    spec = np.abs(np.fft.rfft(w.samples * np.hanning(len(w))))
    return np.argmax(spec) * SR / len(w), SR / len(w)


def test_criterion_09_dsp():
    t = np.arange(SR) / SR
    tone = Waveform(0.5 * np.sin(2 * np.pi * 440.0 * t), SR)
    shifted = pitch_shift(tone, 200)
    stretched = tempo_stretch(tone, 0.9)
    hz_p, bin_p = _peak(shifted)
    hz_t, bin_t = _peak(stretched)
    target = 440.0 * 2 ** (200 / 1200)
    frame = int(0.010 * SR)
    len_err = abs(len(stretched) - SR / 0.9)
    ok = abs(hz_p - target) <= bin_p and abs(hz_t - 440.0) <= bin_t and len_err <= frame
    verdict(9, ok, f"pitch +200 cents peak {hz_p:.1f} Hz (target {target:.1f}), tempo 0.9 peak "
                   f"{hz_t:.1f} Hz, length {len(stretched)} vs {SR / 0.9:.1f}")


# -- 10: determinism -----------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    cfg = RunConfig().with_overrides([
        "corpus.n_speakers=3", "corpus.utts_per_speaker=4", "corpus.duration=4.0",
        "train.epochs=3", "train.batch_size=4", "aug.p_pitch=0.5", "aug.p_tempo=0.5"])
    a = trainer.train(cfg, tmp_path / "a")
    b = trainer.train(cfg, tmp_path / "b")
    same = (a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
            and a.log_path.read_bytes() == b.log_path.read_bytes())
    epoch1 = tmp_path / "a" / "checkpoints" / "epoch_001.ckpt"
    resumed = trainer.train(cfg, tmp_path / "c", resume=epoch1)
    tail = [ln for ln in a.log_path.read_text().splitlines(True) if ln[:1].isdigit()
            and int(ln.split("\t")[0]) > 3]
    resume_same = (resumed.checkpoint.read_bytes() == a.checkpoint.read_bytes()
                   and resumed.log_path.read_text().endswith("".join(tail)))
    verdict(10, same and resume_same,
            f"identical reruns={same}, resume from epoch 1 reproduces final checkpoint={resume_same}")


# -- 11: fine-tuning ----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_11_finetune(ar_run, corpus, eval_set, tmp_path):
    cfg, result, _ = ar_run
    m, audio = corpus
    labeled = trainer.labeled_subset(m, cfg.finetune.label_fraction)
    pre = trainer.finetune(cfg, result.checkpoint, labeled, tmp_path / "pre", audio=audio)
    rand = trainer.finetune(cfg, None, labeled, tmp_path / "rand", audio=audio)
    e_pre = _eer(_student(pre.checkpoint), cfg, eval_set)
    e_rand = _eer(_student(rand.checkpoint), cfg, eval_set)
    verdict(11, e_pre < e_rand,
            f"{len(labeled)} labeled utterances: EER from DINO init {100 * e_pre:.2f}% vs "
            f"random init {100 * e_rand:.2f}%")
