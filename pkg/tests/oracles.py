"""Independent reference implementations used by the tests.

Everything here is written with explicit loops or exhaustive enumeration and
shares no code with the package.
"""
import itertools
import math

import numpy as np


# -- network ------------------------------------------------------------------

def gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def naive_encoder(params, feats, tdnn):
    """feats (T, D) -> embedding, with per-element loops."""
    x = [list(row) for row in feats]
    for i, (k, d) in enumerate(tdnn):
        w = params[f"tdnn{i}.weight"]
        b = params[f"tdnn{i}.bias"]
        c_in = len(x[0])
        c_out = w.shape[1]
        t_out = len(x) - d * (k - 1)
        y = []
        for t in range(t_out):
            row = []
            for o in range(c_out):
                s = b[o]
                for j in range(k):
                    for c in range(c_in):
                        s += x[t + j * d][c] * w[j * c_in + c, o]
                row.append(max(s, 0.0))
            y.append(row)
        x = y
    n_t, n_c = len(x), len(x[0])
    mean = [sum(x[t][c] for t in range(n_t)) / n_t for c in range(n_c)]
    sd = [math.sqrt(sum((x[t][c] - mean[c]) ** 2 for t in range(n_t)) / n_t + 1e-8)
          for c in range(n_c)]
    pooled = mean + sd
    w, b = params["embed.weight"], params["embed.bias"]
    return np.array([b[o] + sum(pooled[i] * w[i, o] for i in range(len(pooled)))
                     for o in range(w.shape[1])])


def naive_head(params, emb, n_layers, act=gelu):
    h = list(emb)
    for i in range(n_layers):
        w, b = params[f"head{i}.weight"], params[f"head{i}.bias"]
        h = [act(b[o] + sum(h[j] * w[j, o] for j in range(len(h)))) for o in range(w.shape[1])]
    w, b = params["bottleneck.weight"], params["bottleneck.bias"]
    z = [b[o] + sum(h[j] * w[j, o] for j in range(len(h))) for o in range(w.shape[1])]
    norm = max(math.sqrt(sum(v * v for v in z)), 1e-12)
    z = [v / norm for v in z]
    v = params["proto.v"]
    q = []
    for col in range(v.shape[1]):
        cn = math.sqrt(sum(v[r, col] ** 2 for r in range(v.shape[0])))
        q.append(sum(z[r] * v[r, col] / cn for r in range(v.shape[0])))
    return np.array(q)


def finite_difference(f, params, name, h=1e-4):
    """Central differences of scalar f() with respect to every entry of params[name]."""
    p = params[name]
    g = np.zeros_like(p)
    it = np.nditer(p, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = p[idx]
        p[idx] = old + h
        up = f()
        p[idx] = old - h
        down = f()
        p[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


# -- metrics ------------------------------------------------------------------

def brute_eer(scores, labels):
    """EER by exhaustive search over operating points.

    Every threshold between consecutive distinct scores gives a (P_fa, P_miss)
    point; the EER is the lowest point where a segment between any two of them
    crosses P_miss = P_fa.  Randomizing between two thresholds realizes every
    point of that segment, which makes this the convex-hull EER.
    """
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, bool)
    n_t, n_n = labels.sum(), (~labels).sum()
    cuts = sorted(set(scores.tolist()))
    thresholds = [-math.inf] + [c + 1e-12 for c in cuts]
    pts = []
    for th in thresholds:
        accept = scores >= th
        pts.append(((accept & ~labels).sum() / n_n, (~accept & labels).sum() / n_t))
    best = 1.0
    for (fa1, mi1), (fa2, mi2) in itertools.combinations(pts, 2):
        d1, d2 = mi1 - fa1, mi2 - fa2
        if d1 == 0:
            best = min(best, fa1)
        if d2 == 0:
            best = min(best, fa2)
        if d1 * d2 < 0:
            a = d1 / (d1 - d2)
            best = min(best, fa1 + a * (fa2 - fa1))
    return best


def brute_min_dcf(scores, labels, p_target, c_miss=1.0, c_fa=1.0):
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, bool)
    best = math.inf
    for th in [-math.inf] + sorted(set(scores.tolist())) + [math.inf]:
        accept = scores >= th if th != math.inf else np.zeros_like(labels)
        p_miss = (~accept & labels).sum() / labels.sum()
        p_fa = (accept & ~labels).sum() / (~labels).sum()
        best = min(best, c_miss * p_miss * p_target + c_fa * p_fa * (1 - p_target))
    return best / min(c_miss * p_target, c_fa * (1 - p_target))


def brute_nmi(a, b):
    n = len(a)
    pa, pb, pab = {}, {}, {}
    for x, y in zip(a, b):
        pa[x] = pa.get(x, 0) + 1 / n
        pb[y] = pb.get(y, 0) + 1 / n
        pab[(x, y)] = pab.get((x, y), 0) + 1 / n
    mi = sum(p * math.log(p / (pa[x] * pb[y])) for (x, y), p in pab.items())
    ha = -sum(p * math.log(p) for p in pa.values())
    hb = -sum(p * math.log(p) for p in pb.values())
    if ha == 0 and hb == 0:
        return 1.0
    if ha == 0 or hb == 0:
        return 0.0
    return mi / ((ha + hb) / 2)


def brute_as_norm(enroll, test, cohort, top_n):
    """Per-trial loops: cosine to every cohort vector, sort, keep the top n."""
    def cos(u, v):
        return sum(x * y for x, y in zip(u, v)) / math.sqrt(sum(x * x for x in u) * sum(y * y for y in v))

    out = []
    for e, t in zip(enroll, test):
        s = cos(e, t)
        stats = []
        for side in (e, t):
            top = sorted((cos(side, c) for c in cohort), reverse=True)[:top_n]
            mu = sum(top) / len(top)
            sd = max(math.sqrt(sum((x - mu) ** 2 for x in top) / len(top)), 1e-6)
            stats.append((mu, sd))
        out.append(0.5 * ((s - stats[0][0]) / stats[0][1] + (s - stats[1][0]) / stats[1][1]))
    return np.array(out)
