"""
Straight-line reference of the node equations, one scalar at a time.
Convex mean, literal variance, unweighted winner distance, epsilon-floored belief.
"""

import math


class ReferenceNode:
    def __init__(self, K, spatial_dim, alpha, beta, gamma, eps=1e-9, floor=1e-6, init_var=1.0):
        self.K = K
        self.D = spatial_dim + K
        self.alpha, self.beta, self.gamma = alpha, beta, gamma
        self.eps, self.floor, self.init_var = eps, floor, init_var
        self.mu = []
        self.var = []
        self.psi = []
        self.belief = [1.0 / K] * K
        self.last_winner = None

    def step(self, spatial):
        o = list(spatial) + list(self.belief)
        self.last_winner = None

        if len(self.mu) < self.K:
            if o not in self.mu:
                self.mu.append(o)
                self.var.append([self.init_var] * self.D)
                self.psi.append(1.0)
            return list(self.belief)

        best, best_d = 0, None
        for c in range(self.K):
            s = 0.0
            for i in range(self.D):
                s += (o[i] - self.mu[c][i]) ** 2
            d = self.psi[c] * math.sqrt(s)
            if best_d is None or d < best_d:
                best, best_d = c, d
        w = best
        self.last_winner = w

        for i in range(self.D):
            self.mu[w][i] = self.alpha * self.mu[w][i] + (1.0 - self.alpha) * o[i]
        for i in range(self.D):
            sq = (o[i] - self.mu[w][i]) ** 2
            v = self.beta * self.var[w][i] + (1.0 - self.beta) * abs(sq - self.var[w][i])
            self.var[w][i] = max(v, self.floor)

        for c in range(self.K):
            self.psi[c] = self.gamma * self.psi[c] + (1.0 - self.gamma) * (1.0 if c == w else 0.0)

        inv = []
        for c in range(self.K):
            n = 0.0
            for i in range(self.D):
                n += (o[i] - self.mu[c][i]) ** 2 / self.var[c][i]
            inv.append(1.0 / max(n, self.eps))
        total = sum(inv)
        self.belief = [x / total for x in inv]
        return list(self.belief)
