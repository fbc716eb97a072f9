"""Brute-force posterior for a two-frame, four-observation problem.

Built only on scipy distributions and hand-written conjugate updates; it does
not import the package under test. Parameter timelines are integrated out: a
cluster with members in both frames is linked through one auxiliary variable
``z`` whose position is integrated numerically and whose single color draw is
summed over.
"""
import itertools

import numpy as np
from scipy import integrate, stats


class Toy:
    def __init__(self, alpha=1.0, rho=0.4, kappa0=0.5, nu0=4.0, slack=2):
        self.alpha, self.rho, self.kappa0, self.nu0 = alpha, rho, kappa0, nu0
        self.mu0 = np.zeros(2)
        self.Lam0 = np.eye(2)
        self.q0 = np.ones(2)
        self.T = 2
        self.dmax = self.T + slack  # 1-based cap on deletion times
        # frames, positions, colors (one trial per aux draw, so V=2 with unit totals)
        self.frames = [1, 1, 2, 2]
        self.pos = np.array([[0.0, 0.0], [1.0, 0.3], [0.5, 0.0], [-0.5, 0.8]])
        self.counts = np.array([[1, 0], [0, 1], [1, 0], [1, 0]])

    # ---- conjugate pieces -------------------------------------------------
    def _post(self, idx):
        k, nu, mu, Lam, q = self.kappa0, self.nu0, self.mu0.copy(), self.Lam0.copy(), self.q0.copy()
        for i in idx:  # sequential rank-one updates
            x = self.pos[i]
            Lam = Lam + k / (k + 1) * np.outer(x - mu, x - mu)
            mu = (k * mu + x) / (k + 1)
            k, nu = k + 1, nu + 1
            q = q + self.counts[i]
        return k, nu, mu, Lam, q

    def _pred_spatial(self, post):
        k, nu, mu, Lam, _ = post
        dof = nu - 1
        return stats.multivariate_t(loc=mu, shape=Lam * (k + 1) / (k * dof), df=dof)

    def _pred_color(self, post, counts):
        q = post[4]
        return stats.dirichlet_multinomial(alpha=q, n=int(np.sum(counts))).pmf(counts)

    def ml(self, idx):
        """Closed-form marginal likelihood of observations ``idx`` as a chain of predictives."""
        out = 1.0
        for j, i in enumerate(idx):
            post = self._post(idx[:j])
            out *= self._pred_spatial(post).pdf(self.pos[i]) * self._pred_color(post, self.counts[i])
        return out

    def ml_linked(self, a, b):
        """Members ``a`` at frame 1 and ``b`` at frame 2 of one cluster, linked through z."""
        pa, pb, p0 = self._post(a), self._post(b), self._post([])
        color = sum(self._pred_color(pa, zc) * self._pred_color(pb, zc) / self._pred_color(p0, zc)
                    for zc in ([1, 0], [0, 1]))
        ta, tb, t0 = self._pred_spatial(pa), self._pred_spatial(pb), self._pred_spatial(p0)

        def f(y, x):
            z = np.array([x, y])
            return ta.pdf(z) * tb.pdf(z) / t0.pdf(z)

        spatial, _ = integrate.dblquad(f, -60, 60, -60, 60, epsabs=1e-12, epsrel=1e-9)
        return self.ml(a) * self.ml(b) * color * spatial

    # ---- enumeration --------------------------------------------------------
    def lifetime_pmf(self, t):
        """Capped lifetime prior over d in t+1 .. dmax (1-based), tail lumped at the cap."""
        out = {}
        for d in range(t + 1, self.dmax):
            out[d] = self.rho * (1 - self.rho) ** (d - t - 1)
        out[self.dmax] = (1 - self.rho) ** (self.dmax - t - 1)
        return out

    def enumerate(self):
        """Yields (labels tuple, deletion tuple, unnormalized probability)."""
        a = self.alpha
        cache = {}
        pd1 = self.lifetime_pmf(1)
        pd2 = self.lifetime_pmf(2)
        for lab12 in [(0, 0), (0, 1)]:
            urn1 = a / a * (1 / (1 + a) if lab12 == (0, 0) else a / (1 + a))
            for d1, d2 in itertools.product(pd1, pd1):
                surv = {}
                for lab, d in zip(lab12, (d1, d2)):
                    surv[lab] = surv.get(lab, 0) + (d > 2)
                # frame 2: sequential urn over obs 3 and 4
                for lab3 in list(surv) + [2]:
                    for lab4 in list(surv) + [2, 3]:
                        sizes = dict(surv)
                        p = 1.0
                        ok = True
                        for lab in (lab3, lab4):
                            S = sum(sizes.values())
                            if lab in surv:
                                if sizes[lab] == 0:
                                    ok = False
                                    break
                                p *= sizes[lab] / (S + a)
                                sizes[lab] += 1
                            else:
                                if lab in sizes:
                                    p *= sizes[lab] / (S + a)
                                    sizes[lab] += 1
                                else:
                                    p *= a / (S + a)
                                    sizes[lab] = 1
                        if not ok:
                            continue
                        if lab3 == 3:  # label 3 is only reachable as the second new cluster
                            continue
                        if lab4 == 3 and lab3 != 2:
                            continue
                        labels = lab12 + (lab3, lab4)
                        lik = 1.0
                        for lab in set(labels):
                            idx = tuple(i for i in range(4) if labels[i] == lab)
                            if idx not in cache:
                                a_idx = [i for i in idx if self.frames[i] == 1]
                                b_idx = [i for i in idx if self.frames[i] == 2]
                                cache[idx] = (self.ml_linked(a_idx, b_idx) if a_idx and b_idx
                                              else self.ml(list(idx)))
                            lik *= cache[idx]
                        for d3, d4 in itertools.product(pd2, pd2):
                            prob = urn1 * pd1[d1] * pd1[d2] * p * pd2[d3] * pd2[d4] * lik
                            yield labels, (d1, d2, d3, d4), prob


def canonical_partition(labels):
    """Set partition of observation indices, in a hashable canonical form."""
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    return tuple(sorted(tuple(g) for g in groups.values()))


def posterior(toy=None):
    toy = toy or Toy()
    parts, dels, total = {}, {}, 0.0
    count_k = {}
    for labels, d, p in toy.enumerate():
        key = canonical_partition(labels)
        parts[key] = parts.get(key, 0.0) + p
        dels[d[0]] = dels.get(d[0], 0.0) + p
        k_final = len({labels[2], labels[3]} | {lab for lab, dd in zip(labels[:2], d[:2]) if dd > 2})
        count_k[k_final] = count_k.get(k_final, 0.0) + p
        total += p
    return ({k: v / total for k, v in parts.items()}, {k: v / total for k, v in dels.items()},
            {k: v / total for k, v in count_k.items()})
