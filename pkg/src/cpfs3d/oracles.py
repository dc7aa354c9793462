"""Slow, independent reference implementations.

Everything here is written with plain Python loops and ``math`` on float64
values, sharing no code with the vectorized modules it checks.  The tests and
the ``oracle`` subcommand compare the two routes.
"""

import math

import numpy as np


def _f(x):
    return [float(v) for v in np.asarray(x, dtype=np.float64).reshape(-1)]


def _dot(a, b):
    return math.fsum(x * y for x, y in zip(a, b))


def _norm(a):
    return math.sqrt(_dot(a, a))


def _unit(a):
    n = _norm(a)
    return [x / n for x in a]


def _lse(xs):
    m = max(xs)
    return m + math.log(math.fsum(math.exp(x - m) for x in xs))


# ---------------------------------------------------------------------------
# Geometry and AP
# ---------------------------------------------------------------------------


def _interval(box, axis):
    if isinstance(box, dict):
        c, s = box["center"][axis], box["size"][axis]
    else:
        c, s = box.center[axis], box.size[axis]
    return float(c) - float(s) / 2, float(c) + float(s) / 2


def iou3d(a, b):
    """Axis-by-axis interval overlap; volumes as products of side lengths."""
    inter, va, vb = 1.0, 1.0, 1.0
    for axis in range(3):
        a0, a1 = _interval(a, axis)
        b0, b1 = _interval(b, axis)
        lo, hi = max(a0, b0), min(a1, b1)
        inter *= hi - lo if hi > lo else 0.0
        va *= a1 - a0
        vb *= b1 - b0
    union = va + vb - inter
    return inter / union if union > 0 else 0.0


def match(detections, gts, iou_threshold):
    """Greedy matching by descending score: list of TP flags in rank order."""
    ranked = sorted(enumerate(detections), key=lambda t: (-t[1][2], t[0]))
    taken = set()
    flags = []
    for _, (key, box, _) in ranked:
        cands = [(iou3d(box, g), -j, j) for j, g in enumerate(gts.get(key, [])) if (key, j) not in taken]
        if cands:
            o, _, j = max(cands)
            if o >= iou_threshold:
                taken.add((key, j))
                flags.append(True)
                continue
        flags.append(False)
    return flags


def average_precision(detections, gts, iou_threshold):
    """All-point AP: for each recall step, precision is the best precision at
    any rank reaching at least that recall (quadratic scan)."""
    n_gt = sum(len(v) for v in gts.values())
    flags = match(detections, gts, iou_threshold)
    if n_gt == 0:
        return None if not flags else 0.0
    points = []
    tp = 0
    for r, hit in enumerate(flags, start=1):
        tp += hit
        points.append((tp / n_gt, tp / r))
    ap, prev_recall = 0.0, 0.0
    for recall, _ in points:
        if recall > prev_recall:
            best = max(p for rr, p in points if rr >= recall)
            ap += (recall - prev_recall) * best
            prev_recall = recall
    return ap


# ---------------------------------------------------------------------------
# Prototype bank
# ---------------------------------------------------------------------------


def assign(features, bank):
    """Exhaustive cosine argmax per row, lowest index on ties; zero rows -> 0."""
    bank = [_unit(_f(g)) for g in np.asarray(bank)]
    labels = []
    for f in np.asarray(features):
        f = _f(f)
        n = _norm(f)
        if n == 0:
            labels.append(0)
            continue
        best, best_w = -math.inf, 0
        for w, g in enumerate(bank):
            c = _dot(f, g) / n
            if c > best:
                best, best_w = c, w
        labels.append(best_w)
    return labels


def momentum_update(bank, groups, gamma, renormalize=False):
    """groups: dict w -> list of feature rows; returns the updated bank as a list of lists."""
    out = [_f(g) for g in np.asarray(bank)]
    for w, rows in groups.items():
        rows = [_f(r) for r in rows]
        mean = [math.fsum(col) / len(rows) for col in zip(*rows)]
        out[w] = [gamma * g + (1 - gamma) * m for g, m in zip(out[w], mean)]
        if renormalize:
            out[w] = _unit(out[w])
    return out


def attention(x, c, wq, bq, wk, bk, wv, bv):
    """Residual single-head attention, one query row at a time."""
    x, c = np.asarray(x, dtype=np.float64), np.asarray(c, dtype=np.float64)
    d = x.shape[-1]
    lin = lambda v, W, b: [_dot(_f(W[o]), v) + float(b[o]) for o in range(len(b))]
    keys = [lin(_f(r), wk, bk) for r in c]
    vals = [lin(_f(r), wv, bv) for r in c]
    out = []
    for row in x:
        q = lin(_f(row), wq, bq)
        s = [_dot(q, k) / math.sqrt(d) for k in keys]
        z = _lse(s)
        a = [math.exp(v - z) for v in s]
        out.append([float(row[j]) + math.fsum(a[i] * vals[i][j] for i in range(len(vals))) for j in range(len(vals[0]))])
    return out


# ---------------------------------------------------------------------------
# Contrastive objectives
# ---------------------------------------------------------------------------


def semantic_loss(P, tau):
    """P: (B, N, D) prototypes, already projected and normalized."""
    P = np.asarray(P, dtype=np.float64)
    B, N = P.shape[:2]
    total = []
    for b in range(B):
        for n in range(N):
            sims = []
            for m in range(N):
                if m == n:
                    s = math.fsum(_dot(_f(P[b, n]), _f(P[i, n])) for i in range(B) if i != b) / (B - 1)
                else:
                    s = math.fsum(_dot(_f(P[b, n]), _f(P[i, m])) for i in range(B)) / B
                sims.append(s / tau)
            total.append(-(sims[n] - _lse(sims)))
    return math.fsum(total) / (B * N)


def primitive_loss(M, g, tau, denominator="feature"):
    """M, g: (W', D) projected means and detached prototype views."""
    M, g = np.asarray(M, dtype=np.float64), np.asarray(g, dtype=np.float64)
    W = len(M)
    if W < 2:
        return 0.0
    terms = []
    for w in range(W):
        if denominator == "feature":
            row = [_dot(_f(M[j]), _f(g[w])) / tau for j in range(W)]
        else:
            row = [_dot(_f(M[w]), _f(g[j])) / tau for j in range(W)]
        terms.append(-(row[w] - _lse(row)))
    return math.fsum(terms) / W


def orthonormal_infonce(tau):
    """Loss of a two-way InfoNCE row with logits (1/tau, 0): ln(1 + exp(-1/tau))."""
    return math.log1p(math.exp(-1.0 / tau))


# ---------------------------------------------------------------------------
# Detection loss
# ---------------------------------------------------------------------------


def _smooth_l1(x, beta):
    a = abs(x)
    return 0.5 * a * a / beta if a < beta else a - 0.5 * beta


def _xent(logits, target):
    return _lse(logits) - logits[target]


def _dist(a, b):
    return math.sqrt(math.fsum((x - y) ** 2 for x, y in zip(a, b)))


def detection_loss(seeds, votes, props, center, log_size, obj, cls, targets, mean_size,
                   w_obj=0.5, w_box=1.0, w_cls=1.0, pos_radius=0.3, neg_radius=0.6, beta=0.1):
    """Scalar l_det written per element.

    Arrays are nested lists / arrays indexed [b][i][c]; ``targets`` as in
    episodes.episode_targets.  Returns (l_vote, l_objectness, l_box, l_cls, l_det).
    """
    B = len(seeds)
    per = {"vote": [], "obj": [], "box": [], "cls": []}
    for b in range(B):
        t = targets[b]
        gc = [_f(c) for c in t["center"]]
        gs = [_f(s) for s in t["size"]]
        lohi = [(_f(x[0]), _f(x[1])) for x in t["lohi"]]
        ign = [_f(c) for c in t["ignore_center"]]
        vote_terms = []
        for i, s in enumerate(seeds[b]):
            s = _f(s)
            owners = [j for j, (lo, hi) in enumerate(lohi) if all(lo[a] <= s[a] <= hi[a] for a in range(3))]
            if owners:
                j = min(owners, key=lambda j: (_dist(s, gc[j]), j))
                v = _f(votes[b][i])
                vote_terms.append(math.fsum(abs(v[a] - gc[j][a]) for a in range(3)))
        per["vote"].append(math.fsum(vote_terms) / len(vote_terms) if vote_terms else 0.0)
        obj_terms, box_terms, cls_terms = [], [], []
        for p, pc in enumerate(props[b]):
            pc = _f(pc)
            if gc:
                dists = [_dist(pc, g) for g in gc]
                near = min(dists)
                j = dists.index(near)
            else:
                near, j = math.inf, 0
            if near < pos_radius:
                label = 1
            elif near > neg_radius and all(_dist(pc, c) > neg_radius for c in ign):
                label = 0
            else:
                continue
            obj_terms.append(_xent(_f(obj[b][p]), label))
            if label == 1:
                c, ls = _f(center[b][p]), _f(log_size[b][p])
                target_ls = [math.log(gs[j][a] / float(mean_size[a])) for a in range(3)]
                box_terms.append(math.fsum(_smooth_l1(c[a] - gc[j][a], beta) for a in range(3))
                                 + math.fsum(_smooth_l1(ls[a] - target_ls[a], beta) for a in range(3)))
                cls_terms.append(_xent(_f(cls[b][p]), int(t["slot"][j])))
        mean = lambda xs: math.fsum(xs) / len(xs) if xs else 0.0
        per["obj"].append(mean(obj_terms))
        per["box"].append(mean(box_terms))
        per["cls"].append(mean(cls_terms))
    lv, lo, lb, lc = (math.fsum(per[k]) / B for k in ("vote", "obj", "box", "cls"))
    return lv, lo, lb, lc, lv + w_obj * lo + w_box * lb + w_cls * lc


# ---------------------------------------------------------------------------
# Randomized comparison suite
# ---------------------------------------------------------------------------


def random_box(rng, lo=0.0, hi=3.0, smin=0.1, smax=1.0):
    return {"center": rng.uniform(lo, hi, 3).tolist(), "size": rng.uniform(smin, smax, 3).tolist()}


def random_box_pair(rng):
    """Boxes that overlap often, sometimes share a face, sometimes are disjoint."""
    a = random_box(rng)
    kind = rng.integers(4)
    if kind == 0:
        b = random_box(rng)
    elif kind == 1:
        b = {"center": (np.asarray(a["center"]) + rng.uniform(-0.3, 0.3, 3)).tolist(),
             "size": rng.uniform(0.1, 1.0, 3).tolist()}
    elif kind == 2:
        b = {"center": list(a["center"]), "size": list(a["size"])}
        b["center"][0] = a["center"][0] + (a["size"][0] + b["size"][0]) / 2
    else:
        b = {"center": (np.asarray(a["center"]) + rng.uniform(-0.05, 0.05, 3)).tolist(), "size": list(a["size"])}
    return a, b


def random_ap_instance(rng, n_scenes=4):
    """Detections and GTs for one class; some detections are near-copies of GTs."""
    gts, dets = {}, []
    for s in range(n_scenes):
        key = f"s{s}"
        gts[key] = [random_box(rng) for _ in range(int(rng.integers(0, 4)))]
        for g in gts[key]:
            for _ in range(int(rng.integers(0, 3))):
                jitter = rng.uniform(-0.15, 0.15, 3)
                dets.append((key, {"center": (np.asarray(g["center"]) + jitter).tolist(), "size": g["size"]},
                             float(rng.choice([0.5, rng.uniform()]))))
        for _ in range(int(rng.integers(0, 3))):
            dets.append((key, random_box(rng), float(rng.uniform())))
    order = rng.permutation(len(dets))
    return [dets[i] for i in order], gts


def run_suite(seed=0, n_iou=200, n_ap=200, n_assign=50, tol=1e-9):
    """Compare the vectorized implementations against the oracles above.

    Returns a list of (name, passed, detail) rows.
    """
    import torch

    from . import contrast, eval3d, protobank

    rng = np.random.default_rng(seed)
    rows = []

    err = 0.0
    for _ in range(n_iou):
        a, b = random_box_pair(rng)
        err = max(err, abs(eval3d.iou3d(a, b) - iou3d(a, b)), abs(eval3d.iou3d(b, a) - iou3d(a, b)))
    rows.append(("iou3d", err <= tol, f"{n_iou} instances, max abs diff {err:.2e}"))

    err, n_none = 0.0, 0
    for _ in range(n_ap):
        dets, gts = random_ap_instance(rng)
        thr = float(rng.choice([0.25, 0.5]))
        fast, slow = eval3d.average_precision(dets, gts, thr), average_precision(dets, gts, thr)
        if fast is None or slow is None:
            n_none += 1
            if fast is not slow and fast != slow:
                err = float("inf")
            continue
        err = max(err, abs(fast - slow))
    rows.append(("average_precision", err <= tol, f"{n_ap} instances ({n_none} undefined), max abs diff {err:.2e}"))

    mismatches = 0
    for _ in range(n_assign):
        W, d, n = int(rng.integers(2, 40)), int(rng.integers(2, 16)), int(rng.integers(1, 60))
        bank = protobank.init_bank(int(rng.integers(1 << 30)), W, d).double()
        feats = torch.from_numpy(rng.normal(size=(n, d)))
        if rng.uniform() < 0.2:
            feats[0] = bank[int(rng.integers(W))] * 2.0
        res = protobank.assign(feats, bank)
        mismatches += int(res.labels.tolist() != assign(feats.numpy(), bank.numpy()))
    rows.append(("prototype assignment", mismatches == 0, f"{n_assign} instances, {mismatches} mismatching"))

    err = 0.0
    for _ in range(20):
        M, W, d = int(rng.integers(1, 6)), int(rng.integers(1, 5)), int(rng.integers(2, 9))
        attn = protobank.CrossAttention(d).double()
        x, c = torch.from_numpy(rng.normal(size=(M, d))), torch.from_numpy(rng.normal(size=(W, d)))
        with torch.no_grad():
            fast = attn(x, c).numpy()
        p = {k: v.detach().numpy() for k, v in attn.named_parameters()}
        slow = np.asarray(attention(x.numpy(), c.numpy(), p["q.weight"], p["q.bias"], p["k.weight"], p["k.bias"],
                                    p["v.weight"], p["v.bias"]))
        err = max(err, float(np.abs(fast - slow).max()))
    rows.append(("cross-attention", err <= 1e-9, f"20 instances, max abs diff {err:.2e}"))

    err = 0.0
    for _ in range(20):
        B, N, D = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 6))
        P = torch.nn.functional.normalize(torch.from_numpy(rng.normal(size=(B, N, D))), dim=-1)
        tau = float(rng.uniform(0.1, 1.0))
        err = max(err, abs(float(contrast.semantic_loss(contrast.SemanticPrototypeGrid(P), tau))
                           - semantic_loss(P.numpy(), tau)))
    rows.append(("semantic loss", err <= tol, f"20 instances, max abs diff {err:.2e}"))

    err = 0.0
    for _ in range(20):
        W, D = int(rng.integers(1, 7)), int(rng.integers(2, 6))
        M = torch.nn.functional.normalize(torch.from_numpy(rng.normal(size=(W, D))), dim=-1)
        g = torch.nn.functional.normalize(torch.from_numpy(rng.normal(size=(W, D))), dim=-1)
        denom = str(rng.choice(["feature", "proto"]))
        fast = float(contrast.primitive_loss(contrast.PrimitiveMeanSet(M, g, list(range(W))), 0.2, denom))
        err = max(err, abs(fast - primitive_loss(M.numpy(), g.numpy(), 0.2, denom)))
    rows.append(("primitive loss", err <= tol, f"20 instances, max abs diff {err:.2e}"))

    err = 0.0
    for _ in range(20):
        W, d = int(rng.integers(1, 8)), int(rng.integers(2, 6))
        bank = torch.from_numpy(rng.normal(size=(W, d)))
        feats = torch.from_numpy(rng.normal(size=(int(rng.integers(1, 30)), d)))
        res = protobank.assign(feats, bank)
        gamma = float(rng.uniform())
        for renorm in (False, True):
            fast = protobank.momentum_update(bank, res, gamma, renorm).numpy()
            groups = {w: rows_.numpy() for w, rows_ in res.groups.items()}
            slow = np.asarray(momentum_update(bank.numpy(), groups, gamma, renorm))
            err = max(err, float(np.abs(fast - slow).max()))
    rows.append(("momentum update", err <= 1e-12, f"40 instances, max abs diff {err:.2e}"))

    from . import detector, gradcheck
    err = 0.0
    for _ in range(20):
        seeds, votes, props, center, log_size, obj, cls, targets, mean_size = \
            gradcheck.random_detection_instance(rng)
        res = detector.DetectionResult(center, log_size, mean_size * torch.exp(log_size), obj, cls)
        fast = detector.detection_loss(seeds, votes, props, res, targets, mean_size)
        slow = detection_loss(seeds.numpy(), votes.numpy(), props.numpy(), center.numpy(), log_size.numpy(),
                              obj.numpy(), cls.numpy(), targets, mean_size.numpy())
        got = (fast.l_vote, fast.l_objectness, fast.l_box, fast.l_cls, fast.l_det)
        err = max(err, max(abs(float(a) - b) for a, b in zip(got, slow)))
    rows.append(("detection loss", err <= 1e-9, f"20 instances, max abs diff {err:.2e}"))
    return rows
