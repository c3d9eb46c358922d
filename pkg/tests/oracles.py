"""Brute-force reference implementations, written with explicit Python loops.

They share no code with the package and are deliberately slow.
"""
import math

import numpy as np


def affine(x, w, b):
    out = np.zeros(len(b))
    for j in range(w.shape[0]):
        s = 0.0
        for i in range(w.shape[1]):
            s += w[j, i] * x[i]
        out[j] = s + b[j]
    return out


def softmax_rows(m):
    """Naive exp/sum along the last axis, no max subtraction."""
    out = np.zeros_like(m, dtype=float)
    for i in range(m.shape[0]):
        e = [math.exp(v) for v in m[i]]
        tot = sum(e)
        for j in range(m.shape[1]):
            out[i, j] = e[j] / tot
    return out


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def mean_hl(t):
    H, L, D = t.shape
    out = np.zeros(D)
    for d in range(D):
        s = 0.0
        for h in range(H):
            for l in range(L):
                s += t[h, l, d]
        out[d] = s / (H * L)
    return out


def max_hl(t):
    H, L, D = t.shape
    out = np.full(D, -np.inf)
    for d in range(D):
        for h in range(H):
            for l in range(L):
                out[d] = max(out[d], t[h, l, d])
    return out


def conv2d_dilated(a, k, bias, r):
    """B(i, j, d') = sum_{m, n, d} A(i + m r - p_h, j + n r - p_l, d) K(m, n, d, d') + bias(d').

    Zero padding is explicit: out-of-range reads contribute nothing.  The
    offset ``p`` is half of the dilated span ``(k - 1) r + 1``, rounded down.
    """
    H, L, D = a.shape
    kh, kl, _, Dout = k.shape
    ph = ((kh - 1) * r + 1) // 2
    pl = ((kl - 1) * r + 1) // 2
    padded = np.zeros((H + 2 * ph + kh * r, L + 2 * pl + kl * r, D))
    padded[ph:ph + H, pl:pl + L] = a
    out = np.zeros((H, L, Dout))
    for i in range(H):
        for j in range(L):
            for dp in range(Dout):
                s = bias[dp]
                for m in range(kh):
                    for n in range(kl):
                        for d in range(D):
                            s += padded[i + m * r, j + n * r, d] * k[m, n, d, dp]
                out[i, j, dp] = s
    return out


def instance_norm(g, gamma, beta, eps=1e-5):
    rows, cols = g.shape
    out = np.zeros_like(g, dtype=float)
    for d in range(cols):
        mu = sum(g[i, d] for i in range(rows)) / rows
        var = sum((g[i, d] - mu) ** 2 for i in range(rows)) / rows
        for i in range(rows):
            out[i, d] = gamma[d] * (g[i, d] - mu) / math.sqrt(var + eps) + beta[d]
    return out


def sa(X, Y, w, b):
    """Cross attention with K = V^X = flat X and Q = V^Y = flat Y, then a 1x1 projection.

    Returns (x_sa, y_sa, scores, m_y, m_x) with m_y[j, i] and m_x[i, j].
    """
    H, L, D = X.shape
    N = H * L
    K = X.reshape(N, D)
    Q = Y.reshape(N, D)
    s = np.zeros((N, N))
    for i in range(N):
        for j in range(N):
            s[i, j] = sum(K[i, d] * Q[j, d] for d in range(D))
    m_y = np.zeros((N, N))
    for i in range(N):
        tot = sum(math.exp(s[i, jj]) for jj in range(N))
        for j in range(N):
            m_y[j, i] = math.exp(s[i, j]) / tot
    m_x = np.zeros((N, N))
    for j in range(N):
        tot = sum(math.exp(s[ii, j]) for ii in range(N))
        for i in range(N):
            m_x[i, j] = math.exp(s[i, j]) / tot
    xs = np.zeros((N, D))
    ys = np.zeros((N, D))
    for i in range(N):
        for j in range(N):
            xs[i] += m_y[j, i] * Q[j]
    for j in range(N):
        for i in range(N):
            ys[j] += m_x[i, j] * K[i]
    proj = lambda rows: np.array([affine(v, w, b) for v in rows])
    return proj(xs).reshape(H, L, -1), proj(ys).reshape(H, L, -1), s, m_y, m_x


def fa3(X, gamma, beta, wh, bh, wl, bl):
    H, L, D = X.shape
    z_h = np.zeros((H, D))
    z_l = np.zeros((L, D))
    for h in range(H):
        for d in range(D):
            z_h[h, d] = sum(X[h, l, d] for l in range(L)) / L
    for l in range(L):
        for d in range(D):
            z_l[l, d] = sum(X[h, l, d] for h in range(H)) / H
    cat = np.zeros((H + L, D))
    for i in range(H):
        for d in range(D):
            cat[i, d] = sigmoid(z_h[i, d])
    for i in range(L):
        for d in range(D):
            cat[H + i, d] = sigmoid(z_l[i, d])
    g = instance_norm(cat, gamma, beta)
    a = np.array([affine(g[h], wh, bh) for h in range(H)])
    c = np.array([affine(g[H + l], wl, bl) for l in range(L)])
    out = np.zeros((H, L, wh.shape[0]))
    for h in range(H):
        for l in range(L):
            for dp in range(wh.shape[0]):
                out[h, l, dp] = a[h, dp] * c[l, dp]
    return out


def pooling_fusion(x, y):
    D = x.shape[-1]
    u_max, u_avg, v_max, v_avg = max_hl(x), mean_hl(x), max_hl(y), mean_hl(y)
    prod = [u_avg[d] * v_avg[d] for d in range(D)]
    diff = [abs(u_avg[d] - v_avg[d]) for d in range(D)]
    return np.concatenate([u_max, u_avg, v_max, v_avg, prod, diff])


def head_probs(v, w1, b1, w2, b2):
    hidden = [max(0.0, s) for s in affine(v, w1, b1)]
    logits = affine(np.array(hidden), w2, b2)
    return softmax_rows(logits[None, :])[0]


def classify_head(x, y, w1, b1, w2, b2):
    v = np.concatenate([mean_hl(x), mean_hl(y), mean_hl(x * y)])
    return head_probs(v, w1, b1, w2, b2)


def accuracy_by_confusion(pred, labels, n_labels):
    cm = np.zeros((n_labels, n_labels), dtype=int)
    for p, t in zip(pred, labels):
        cm[t, p] += 1
    return np.trace(cm) / cm.sum()


def adam_scalar(theta, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar Adam, one update per entry of ``grads``."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        theta -= lr * m_hat / (math.sqrt(v_hat) + eps)
    return theta
