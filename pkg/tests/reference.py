"""Scalar pure-Python forward pass, written independently of the library's array code."""
from __future__ import annotations

import math


def sig(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v))


def silu(v: float) -> float:
    return v * sig(v)


def vecmat(x: list[float], w: list[list[float]]) -> list[float]:
    return [sum(x[i] * w[i][j] for i in range(len(x))) for j in range(len(w[0]))]


def rms(x: list[float], gain: list[float], eps: float) -> list[float]:
    r = math.sqrt(sum(v * v for v in x) / len(x) + eps)
    return [v / r * g for v, g in zip(x, gain)]


def dense(lin) -> list[list[float]]:
    return lin.cached.dequantize().tolist()


def bias(lin, n: int) -> list[float]:
    return lin.bias.data.tolist() if lin.bias is not None else [0.0] * n


def cumax_ref(gamma_logits: list[list[float]]) -> list[list[float]]:
    n, d = len(gamma_logits), len(gamma_logits[0])
    out = [[0.0] * d for _ in range(n)]
    for j in range(d):
        col = [gamma_logits[k][j] for k in range(n)]
        m = max(col)
        e = [math.exp(v - m) for v in col]
        s = sum(e)
        p = [v / s for v in e]
        acc = 0.0
        for k in range(n):
            acc += p[k]
            out[k][j] = acc - p[0]
    return out


def model_forward_ref(model, tokens: list[int]) -> list[list[float]]:
    cfg = model.config
    d = cfg.d
    gam = cumax_ref(model.gamma_logits.data.tolist()) if cfg.n_layers else []
    xs = [model.embedding.data[t].tolist() for t in tokens]
    for k, block in enumerate(model.blocks):
        m = block.mlgru
        wf, wc, wg, wo = (dense(lin) for lin in m.linears())
        bf, bc, bg, bo = (bias(lin, d) for lin in m.linears())
        wr = None
        if m.reservoir is not None:
            lam = m.reservoir.lambda_max
            wr = [[v / lam for v in row] for row in m.reservoir.matrix.dequantize().tolist()]
        ws, wu, wq = dense(block.glu.w_s), dense(block.glu.w_u), dense(block.glu.w_q)
        g1, g2 = block.norm1.data.tolist(), block.norm2.data.tolist()
        h = [0.0] * d
        ys = []
        for x in xs:
            xn = rms(x, g1, block.eps)
            f = [sig(v + b) for v, b in zip(vecmat(xn, wf), bf)]
            fp = [gam[k][j] + (1 - gam[k][j]) * f[j] for j in range(d)]
            z = [v + b for v, b in zip(vecmat(xn, wc), bc)]
            if wr is not None:
                z = [zj + rj for zj, rj in zip(z, vecmat(h, wr))]
            c = [silu(v) for v in z]
            h = [fp[j] * h[j] + (1 - fp[j]) * c[j] for j in range(d)]
            g = [sig(v + b) for v, b in zip(vecmat(xn, wg), bg)]
            o = [v + b for v, b in zip(vecmat([g[j] * h[j] for j in range(d)], wo), bo)]
            a = [x[j] + o[j] for j in range(d)]
            an = rms(a, g2, block.eps)
            p = [silu(s) * u for s, u in zip(vecmat(an, ws), vecmat(an, wu))]
            q = vecmat(p, wq)
            ys.append([a[j] + q[j] for j in range(d)])
        xs = ys
    head = dense(model.head)
    return [vecmat(rms(x, model.final_norm.data.tolist(), cfg.norm_eps), head) for x in xs]
