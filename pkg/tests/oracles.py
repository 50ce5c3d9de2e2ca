"""Brute-force reference implementations used to cross-check the vectorized
loss and metric code. Plain python loops, float64 accumulation, no torch
reductions."""

import math

import torch


def oracle_kl(m, q, alpha):
    ms, qs = m.flatten().tolist(), q.flatten().tolist()
    return sum(mi * math.log((mi + alpha) / (qi + alpha)) for mi, qi in zip(ms, qs)) / len(ms)


def oracle_channel_softmax(f):
    out = torch.empty_like(f, dtype=torch.float64)
    for j in range(f.shape[0]):
        vals = f[j].flatten().double().tolist()
        exps = [math.exp(v) for v in vals]
        s = sum(exps)
        out[j] = torch.tensor([e / s for e in exps]).reshape(f.shape[1:])
    return out


def oracle_channel_kl(d_opt, d_ref, alpha):
    vals = [oracle_kl(d_opt[j], d_ref[j], alpha) for j in range(d_opt.shape[0])]
    return sum(vals) / len(vals)


def oracle_alignment_loss(layers_opt, layers_ref, alpha):
    vals = [
        oracle_channel_kl(oracle_channel_softmax(a), oracle_channel_softmax(b), alpha)
        for a, b in zip(layers_opt, layers_ref)
    ]
    return sum(vals) / len(vals)


def oracle_bce(p, m, eps=1e-7):
    ps, ms = p.flatten().tolist(), m.flatten().tolist()
    total = 0.0
    for pi, mi in zip(ps, ms):
        pc = min(max(pi, eps), 1 - eps)
        total += mi * math.log(pc) + (1 - mi) * math.log(1 - pc)
    return -total / len(ps)


def oracle_dice(p, m, smooth=1e-6):
    ps, ms = p.flatten().tolist(), m.flatten().tolist()
    inter = sum(pi * mi for pi, mi in zip(ps, ms))
    denom = sum(pi * pi for pi in ps) + sum(mi * mi for mi in ms)
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def oracle_mask_loss(p, m, lam):
    return lam * oracle_bce(p, m) + (1 - lam) * oracle_dice(p, m)


def oracle_f1(pred, gt):
    tp = fp = fn = 0
    for p, g in zip(pred.flatten().tolist(), gt.flatten().tolist()):
        tp += p == 1 and g == 1
        fp += p == 1 and g == 0
        fn += p == 0 and g == 1
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)
