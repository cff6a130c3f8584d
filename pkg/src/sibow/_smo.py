"""SMO for the box-constrained SVM dual with per-point upper bounds.

    min  0.5 a'Qa - sum(a)   s.t.  y'a = 0,  0 <= a_i <= C_i,   Q_ij = y_i y_j K_ij

Working-set selection uses second-order information (Fan, Chen & Lin 2005),
the same rule as LIBSVM, without shrinking.
"""

import numpy as np
from numba import njit

TAU = 1e-12


@njit(cache=True, nogil=True)
def smo(K, y, C, eps, max_iter):
    n = y.shape[0]
    alpha = np.zeros(n)
    G = -np.ones(n)
    it = 0
    gap = np.inf
    while it < max_iter:
        # i: maximal violator in the "up" set
        gmax = -np.inf
        i = -1
        for t in range(n):
            if (y[t] > 0 and alpha[t] < C[t]) or (y[t] < 0 and alpha[t] > 0):
                v = -y[t] * G[t]
                if v > gmax:
                    gmax = v
                    i = t
        gmax2 = -np.inf
        j = -1
        obj_min = np.inf
        for t in range(n):
            if (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C[t]):
                v = y[t] * G[t]
                if v > gmax2:
                    gmax2 = v
                if i >= 0:
                    b = gmax + v
                    if b > 0:
                        a = K[i, i] + K[t, t] - 2.0 * K[i, t]
                        if a <= 0:
                            a = TAU
                        o = -(b * b) / a
                        if o <= obj_min:
                            if o < obj_min or j < 0:
                                obj_min = o
                                j = t
        gap = gmax + gmax2
        if i < 0 or j < 0 or gap < eps:
            break
        it += 1

        ai_old = alpha[i]
        aj_old = alpha[j]
        Ci = C[i]
        Cj = C[j]
        if y[i] != y[j]:
            quad = K[i, i] + K[j, j] - 2.0 * K[i, j]
            if quad <= 0:
                quad = TAU
            delta = (-G[i] - G[j]) / quad
            diff = ai_old - aj_old
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = -diff
            if diff > Ci - Cj:
                if alpha[i] > Ci:
                    alpha[i] = Ci
                    alpha[j] = Ci - diff
            else:
                if alpha[j] > Cj:
                    alpha[j] = Cj
                    alpha[i] = Cj + diff
        else:
            quad = K[i, i] + K[j, j] - 2.0 * K[i, j]
            if quad <= 0:
                quad = TAU
            delta = (G[i] - G[j]) / quad
            s = ai_old + aj_old
            alpha[i] -= delta
            alpha[j] += delta
            if s > Ci:
                if alpha[i] > Ci:
                    alpha[i] = Ci
                    alpha[j] = s - Ci
            else:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = s
            if s > Cj:
                if alpha[j] > Cj:
                    alpha[j] = Cj
                    alpha[i] = s - Cj
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = s

        dai = alpha[i] - ai_old
        daj = alpha[j] - aj_old
        yi = y[i]
        yj = y[j]
        for t in range(n):
            G[t] += y[t] * (yi * K[i, t] * dai + yj * K[j, t] * daj)

    # bias: average over free vectors, else midpoint of the feasible interval
    ub = np.inf
    lb = -np.inf
    acc = 0.0
    nfree = 0
    for t in range(n):
        yg = y[t] * G[t]
        if alpha[t] >= C[t]:
            if y[t] < 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        elif alpha[t] <= 0:
            if y[t] > 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        else:
            nfree += 1
            acc += yg
    if nfree > 0:
        rho = acc / nfree
    else:
        rho = 0.5 * (ub + lb)
    return alpha, -rho, it, gap
