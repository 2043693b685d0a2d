"""Naive loop implementations used as independent references.

Nothing here imports the package's numerical code: cluster means, Helmert
weights, neighbour averages and moment sums are all re-derived with plain
Python loops from the model definitions.
"""
import math

import numpy as np


def h(s, t, T):
    if s == t:
        return math.sqrt((T - t) / (T - t + 1))
    if s > t:
        return -1.0 / math.sqrt((T - t) * (T - t + 1))
    return 0.0


def cluster_mean(values, cluster, i):
    members = [j for j in range(len(cluster)) if cluster[j] == cluster[i]]
    return sum(values[j] for j in members) / len(members)


def neighbor_lists(adj):
    """adj[i][j] truthy when j is an in-neighbour of i."""
    n = len(adj)
    return [[j for j in range(n) if adj[i][j]] for i in range(n)]


def regressors(y, X, nbrs, group, cluster):
    """W[i][t-1] = [y_{i,t-1}, avg over bank nbrs, avg over firm nbrs, X_{i,t}] for t=1..T."""
    n, T1 = y.shape
    T = T1 - 1
    W = np.zeros((n, T, 3 + X.shape[2]))
    for i in range(n):
        for t in range(1, T + 1):
            row = [y[i, t - 1]]
            for src in (0, 1):
                js = [j for j in nbrs[i] if group[j] == src]
                if not js:
                    row.append(0.0)
                else:
                    acc = 0.0
                    for j in js:
                        acc += y[j, t - 1] - cluster_mean(y[:, t - 1], cluster, j)
                    row.append(acc / len(js))
            row.extend(X[i, t - 1])
            W[i, t - 1] = row
    return W


def moments(Z, y, W, group, cluster, K):
    """A and B summed over t=1..T-1 with the inner Helmert sum written out."""
    n, T1 = y.shape
    T = T1 - 1
    dz, dw = Z.shape[2], W.shape[2]
    units = [i for i in range(n) if group[i] == K]
    A = np.zeros(dz)
    B = np.zeros((dz, dw))
    for t in range(1, T):
        for i in units:
            zd = [Z[i, t - 1, a] - cluster_mean(Z[:, t - 1, a], cluster, i) for a in range(dz)]
            for s in range(t, T + 1):
                hst = h(s, t, T)
                yd = y[i, s] - cluster_mean(y[:, s], cluster, i)
                wd = [W[i, s - 1, b] - cluster_mean(W[:, s - 1, b], cluster, i) for b in range(dw)]
                for a in range(dz):
                    A[a] += hst * zd[a] * yd / len(units)
                    for b in range(dw):
                        B[a, b] += hst * zd[a] * wd[b] / len(units)
    return A, B


def omega(Z, y, W, delta, group, cluster, K):
    n, T1 = y.shape
    T = T1 - 1
    dz = Z.shape[2]
    units = [i for i in range(n) if group[i] == K]
    out = np.zeros((dz, dz))
    for i in units:
        g = np.zeros(dz)
        for t in range(1, T):
            uh = 0.0
            for s in range(t, T + 1):
                yd = y[i, s] - cluster_mean(y[:, s], cluster, i)
                wd = sum((W[i, s - 1, b] - cluster_mean(W[:, s - 1, b], cluster, i)) * delta[b]
                         for b in range(W.shape[2]))
                uh += h(s, t, T) * (yd - wd)
            for a in range(dz):
                g[a] += (Z[i, t - 1, a] - cluster_mean(Z[:, t - 1, a], cluster, i)) * uh
        out += np.outer(g, g) / len(units)
    return out


def helmert_of(series, cluster, T):
    """series covers periods 1..T; returns periods 1..T-1."""
    n = series.shape[0]
    out = np.zeros((n, T - 1) + series.shape[2:])
    for i in range(n):
        for t in range(1, T):
            for s in range(t, T + 1):
                dev = series[i, s - 1] - np.mean(
                    [series[j, s - 1] for j in range(n) if cluster[j] == cluster[i]], axis=0)
                out[i, t - 1] += h(s, t, T) * dev
    return out


def projected_instruments(W, cluster, T, basis_fn):
    """Fitted values of W^H on the basis via explicit normal equations per period."""
    WH = helmert_of(W, cluster, T)
    n = W.shape[0]
    Z = np.zeros_like(WH)
    for t in range(1, T):
        wd = np.array([W[i, t - 1] - np.mean([W[j, t - 1] for j in range(n)
                                               if cluster[j] == cluster[i]], axis=0)
                       for i in range(n)])
        prev = None
        if t > 1:
            prev = np.array([W[i, t - 2] - np.mean([W[j, t - 2] for j in range(n)
                                                    if cluster[j] == cluster[i]], axis=0)
                             for i in range(n)])
        phi = np.array([basis_fn(wd[i], None if prev is None else prev[i], t) for i in range(n)])
        G = sum(np.outer(phi[j], phi[j]) for j in range(n))
        C = sum(np.outer(WH[j, t - 1], phi[j]) for j in range(n))
        coef = np.linalg.solve(G, C.T)  # G symmetric: (C G^-1)^T = G^-1 C^T
        for i in range(n):
            Z[i, t - 1] = coef.T @ phi[i]
    return Z
