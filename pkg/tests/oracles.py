"""Independent reference computations used by the tests.

Nothing here calls into the package's closed forms: every quantity is built
from truncated series, explicit enumeration or plain loops.
"""

import itertools
import math
from fractions import Fraction

N_ORACLE = 50


def exp_series(x, terms=80):
    """``exp(x)`` from its Taylor series (for moderate ``|x|``)."""
    return math.fsum(x**k / math.factorial(k) for k in range(terms))


def pmf(law, mu, n):
    if mu == 0:
        return 1.0 if n == 0 else 0.0
    if law == "thermal":
        r = mu / (1.0 + mu)
        return (1.0 - r) * r**n
    return exp_series(-mu) * mu**n / math.factorial(n)


def click_prob(law, mu, eta, n_max=N_ORACLE):
    return math.fsum(pmf(law, mu, n) * (1.0 - (1.0 - eta) ** n) for n in range(n_max + 1))


def joint_prob(law, mu, a, t, n_max=N_ORACLE):
    return math.fsum(
        pmf(law, mu, n) * (1.0 - (1.0 - a) ** n) * (1.0 - (1.0 - t) ** n) for n in range(n_max + 1)
    )


def first_fire_by_enumeration(q, m):
    """Exact first-click masses from all ``2**m`` herald patterns (rational ``q``)."""
    q = Fraction(q).limit_denominator(10**12)
    masses = [Fraction(0)] * m
    none = Fraction(0)
    for pattern in itertools.product((0, 1), repeat=m):
        w = Fraction(1)
        for bit in pattern:
            w *= q if bit else 1 - q
        if 1 in pattern:
            masses[pattern.index(1)] += w
        else:
            none += w
    return [float(x) for x in masses], float(none)


def coincidence_by_patterns(law, mu, eta_h, eta_s_prime, eta_rt, m):
    """Output probability by summing over every herald pattern of ``m`` bins.

    For a pattern whose earliest herald is bin ``j`` the signal survives with
    the conditional probability ``joint / q`` of that bin.
    """
    q = click_prob(law, mu, eta_h)
    total = 0.0
    for pattern in itertools.product((0, 1), repeat=m):
        if 1 not in pattern:
            continue
        w = 1.0
        for bit in pattern:
            w *= q if bit else 1.0 - q
        j = pattern.index(1) + 1
        t = eta_s_prime * eta_rt ** (m - j + 1)
        total += w * joint_prob(law, mu, eta_h, t) / q
    return total


def heralded_g2(law, mu, eta_h, n_max=N_ORACLE):
    """``<n(n-1)>/<n>**2`` of the heralded number distribution by direct sums.

    Below ``1e-12`` the herald weight is taken as its weak-herald limit ``n``
    (the relative error is of order ``eta_h``, and denormal ``eta_h`` would
    otherwise lose precision).
    """
    w = []
    for n in range(n_max + 1):
        if eta_h < 1e-12:
            herald = float(n)
        elif eta_h < 1:
            herald = -math.expm1(n * math.log1p(-eta_h))
        else:
            herald = float(n > 0)
        w.append(pmf(law, mu, n) * herald)
    z = math.fsum(w)
    if z == 0:
        return 0.0
    m1 = math.fsum(n * wn for n, wn in enumerate(w)) / z
    m2 = math.fsum(n * (n - 1) * wn for n, wn in enumerate(w)) / z
    return m2 / m1**2


def db_to_t(db):
    return 10.0 ** (-db / 10.0)


def ceil_log2(m):
    """Smallest ``p`` with ``2**p >= m`` by repeated doubling."""
    p, size = 0, 1
    while size < m:
        size *= 2
        p += 1
    return p


def max_bipartite_matching(h, s, half):
    """Maximum matching (networkx) counted size where ``|s - h| <= half``."""
    import networkx as nx

    g = nx.Graph()
    left = [("h", i) for i in range(len(h))]
    g.add_nodes_from(left, bipartite=0)
    g.add_nodes_from((("s", k) for k in range(len(s))), bipartite=1)
    for i, a in enumerate(h):
        for k, b in enumerate(s):
            if abs(b - a) <= half:
                g.add_edge(("h", i), ("s", k))
    match = nx.bipartite.maximum_matching(g, top_nodes=left)
    return len(match) // 2
