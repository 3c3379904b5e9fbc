"""Independent brute-force references written with scalar loops and ``math``."""

import math


def dot(a, b):
    return sum(float(x) * float(y) for x, y in zip(a, b))


def norm(a):
    return math.sqrt(dot(a, a))


def sim(a, b):
    return dot(a, b) / (norm(a) * norm(b))


def nt_xent(za, zb, tau):
    views = list(za) + list(zb)
    m = len(views)
    n = m // 2
    total = 0.0
    for i in range(m):
        pos = (i + n) % m
        den = sum(math.exp(sim(views[i], views[k]) / tau) for k in range(m) if k != i)
        total += -math.log(math.exp(sim(views[i], views[pos]) / tau) / den)
    return total / m


def simclr_stream_terms(anchors, positives, lambdas, pairing, tau):
    n = len(anchors)
    out = []
    for i in range(n):
        j = pairing[i]
        den = 0.0
        for k in range(n):
            den += math.exp(sim(anchors[i], positives[k]) / tau)
        for k in range(n):
            if k != i and k != j:
                den += math.exp(sim(anchors[i], anchors[k]) / tau)
        lam = float(lambdas[i])
        li = -lam * math.log(math.exp(sim(anchors[i], positives[i]) / tau) / den)
        li -= (1.0 - lam) * math.log(math.exp(sim(anchors[i], positives[j]) / tau) / den)
        out.append(li)
    return out


def simclr_bsim(zm1, zp2, zm2, zp1, lambdas, pairing, tau):
    a = simclr_stream_terms(zm1, zp2, lambdas, pairing, tau)
    b = simclr_stream_terms(zm2, zp1, lambdas, pairing, tau)
    return (sum(a) + sum(b)) / (2 * len(zm1))


def moco_bsim(q, k1, k2, queue, lambdas, tau):
    total = 0.0
    for n in range(len(q)):
        e1 = math.exp(dot(q[n], k1[n]) / tau)
        e2 = math.exp(dot(q[n], k2[n]) / tau)
        z = e1 + e2 + sum(math.exp(dot(q[n], kq) / tau) for kq in queue)
        lam = float(lambdas[n])
        total += -lam * math.log(e1 / z) - (1.0 - lam) * math.log(e2 / z)
    return total / len(q)


def moco_infonce(q, k, queue, tau):
    total = 0.0
    for n in range(len(q)):
        e = math.exp(dot(q[n], k[n]) / tau)
        z = e + sum(math.exp(dot(q[n], kq) / tau) for kq in queue)
        total += -math.log(e / z)
    return total / len(q)


def byol_v0(q, z1, z2, lambdas):
    total = 0.0
    for n in range(len(q)):
        lam = float(lambdas[n])
        total += 2.0 - 2.0 * (lam * sim(q[n], z1[n]) + (1.0 - lam) * sim(q[n], z2[n]))
    return total / len(q)


def byol_v1(q, z1, z2, lambdas):
    total = 0.0
    for n in range(len(q)):
        lam = float(lambdas[n])
        n1, n2 = norm(z1[n]), norm(z2[n])
        m = [lam * a / n1 + (1.0 - lam) * b / n2 for a, b in zip(z1[n], z2[n])]
        total += 2.0 - 2.0 * sim(q[n], m)
    return total / len(q)
