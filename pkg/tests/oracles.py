"""Independent naive-loop references for the fused and vectorised kernels."""

import math

import numpy as np

BN_EPS = 1e-5


def leaky(x, slope=0.2):
    return x if x > 0 else slope * x


def nfl(F, nbr, layers, training, slope=0.2):
    """max over neighbours j of the MLP applied to F[i] - F[nbr[i, j]].

    ``layers`` is a list of dicts with W, b, gamma, beta, running_mean,
    running_var. In training mode batch statistics cover every edge.
    """
    n, k = nbr.shape
    edges = [[[F[i][c] - F[nbr[i][j]][c] for c in range(len(F[i]))] for j in range(k)] for i in range(n)]
    for L in layers:
        W, b = L["W"], L["b"]
        c_in, c_out = W.shape
        pre = [[[sum(e[a] * W[a][o] for a in range(c_in)) + b[o] for o in range(c_out)] for e in row] for row in edges]
        mean, var = [], []
        for o in range(c_out):
            if training:
                vals = [pre[i][j][o] for i in range(n) for j in range(k)]
                mu = sum(vals) / len(vals)
                mean.append(mu)
                var.append(sum((v - mu) ** 2 for v in vals) / len(vals))
            else:
                mean.append(L["running_mean"][o])
                var.append(L["running_var"][o])
        edges = [[[leaky((pre[i][j][o] - mean[o]) / math.sqrt(var[o] + BN_EPS) * L["gamma"][o] + L["beta"][o], slope)
                   for o in range(c_out)] for j in range(k)] for i in range(n)]
    return np.array([[max(edges[i][j][o] for j in range(k)) for o in range(len(edges[0][0]))] for i in range(n)])


def slot_attention(G, Wq, Wk, Wv, Wz):
    """Per group p: softmax((G Wq)(G Wk)^T) (G Wv) Wz with explicit sums."""
    P, S, C = G.shape

    def proj(x, W):
        return [sum(x[a] * W[a][c] for a in range(C)) for c in range(C)]

    out = np.zeros((P, S, C))
    for p in range(P):
        q = [proj(G[p, i], Wq) for i in range(S)]
        key = [proj(G[p, i], Wk) for i in range(S)]
        v = [proj(G[p, i], Wv) for i in range(S)]
        for i in range(S):
            e = [sum(q[i][c] * key[j][c] for c in range(C)) for j in range(S)]
            top = max(e)
            ex = [math.exp(x - top) for x in e]
            tot = sum(ex)
            w = [x / tot for x in ex]
            mixed = [sum(w[j] * v[j][c] for j in range(S)) for c in range(C)]
            out[p, i] = proj(mixed, Wz)
    return out


def scale_region_features(T, scores, centroids, members):
    S, k = members.shape
    out = np.zeros((S, k, T.shape[1]))
    for i in range(S):
        for j in range(k):
            for c in range(T.shape[1]):
                out[i, j, c] = scores[centroids[i]] * T[members[i, j], c]
    return out


def interpolate_residual(T, Ghat, rep_coords, all_coords):
    """T[v] + IDW blend of the three nearest anchors, ties to the lower anchor index."""
    out = np.array(T, dtype=np.float64, copy=True)
    for v in range(len(all_coords)):
        d = sorted((sum((all_coords[v][a] - rep_coords[u][a]) ** 2 for a in range(3)), u) for u in range(len(rep_coords)))[:3]
        if d[0][0] < 1e-20:
            w = [1.0, 0.0, 0.0]
        else:
            lam = [1.0 / dd for dd, _ in d]
            w = [x / sum(lam) for x in lam]
        for (_, u), wu in zip(d, w):
            out[v] += wu * Ghat[u]
    return out
