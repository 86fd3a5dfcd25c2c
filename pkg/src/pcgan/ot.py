"""Finite-sample primal transport: auction assignment (upper bound) and an exact Hungarian oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit


class AuctionError(RuntimeError):
    pass


@dataclass
class AuctionConfig:
    eps_rel: float = 0.01       # delta in eps_final = delta * mean_cost / n
    scale_factor: float = 5.0   # eps is divided by this between phases
    initial_fraction: float = 0.25  # first-phase eps as a fraction of the largest cost
    max_rounds: int = 1_000_000
    scaling: bool = True
    per_point: bool = True      # if False, eps_final = eps_rel * mean_cost (no 1/n)

    def __post_init__(self):
        if not self.eps_rel > 0:
            raise ValueError("eps_rel must be positive")
        if not self.scale_factor > 1:
            raise ValueError("scale_factor must be > 1")
        if not 0 < self.initial_fraction:
            raise ValueError("initial_fraction must be positive")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


#: single coarse phase used inside the training loop
TRAINING_AUCTION = AuctionConfig(eps_rel=0.05, scaling=False, per_point=False)


@dataclass
class Assignment:
    perm: np.ndarray            # perm[i] = index in Y matched to X[i]
    total: float
    average: float
    rounds: int = 0
    eps_final: float = 0.0
    phase_costs: list[float] = field(default_factory=list)
    phase_eps: list[float] = field(default_factory=list)

    @property
    def gap_bound(self) -> float:
        """Additive bound on total cost above the optimum."""
        return len(self.perm) * self.eps_final


def cost(x, y, metric: str = "l1") -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"points have different dimensions: {x.shape} vs {y.shape}")
    if metric == "l1":
        return float(np.abs(x - y).sum())
    if metric == "l2":
        return float(np.sqrt(((x - y) ** 2).sum()))
    raise ValueError(f"unknown metric {metric!r}")


def cost_matrix(X, Y, metric: str = "l1") -> np.ndarray:
    """Pairwise costs; works on (n, d) or batched (b, n, d) inputs."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[-1] != Y.shape[-1]:
        raise ValueError(f"point dimensions differ: {X.shape[-1]} vs {Y.shape[-1]}")
    diff = X[..., :, None, :] - Y[..., None, :, :]
    if metric == "l1":
        return np.abs(diff).sum(axis=-1)
    if metric == "l2":
        return np.sqrt((diff * diff).sum(axis=-1))
    raise ValueError(f"unknown metric {metric!r}")


@njit(cache=True)
def _auction_phase(C, prices, eps, max_rounds):
    """Jacobi auction on costs C; prices are updated in place.

    Returns (owner_of_bidder, rounds); rounds == -1 signals the round cap.
    """
    n = C.shape[0]
    item_owner = np.full(n, -1, dtype=np.int64)
    bidder_item = np.full(n, -1, dtype=np.int64)
    bid_amount = np.empty(n)
    bid_by = np.empty(n, dtype=np.int64)
    unassigned = n
    rounds = 0
    while unassigned > 0:
        if rounds >= max_rounds:
            return bidder_item, -1
        rounds += 1
        bid_amount[:] = -np.inf
        bid_by[:] = -1
        # every unassigned bidder bids against the same price snapshot
        for i in range(n):
            if bidder_item[i] != -1:
                continue
            best = -np.inf
            second = -np.inf
            jbest = 0
            for j in range(n):
                v = -C[i, j] - prices[j]
                if v > best:
                    second = best
                    best = v
                    jbest = j
                elif v > second:
                    second = v
            if n == 1:
                incr = eps
            else:
                incr = best - second + eps
            b = prices[jbest] + incr
            # strict > keeps the lowest bidder index on equal bids
            if b > bid_amount[jbest]:
                bid_amount[jbest] = b
                bid_by[jbest] = i
        for j in range(n):
            i = bid_by[j]
            if i == -1:
                continue
            prev = item_owner[j]
            if prev != -1:
                bidder_item[prev] = -1
                unassigned += 1
            item_owner[j] = i
            bidder_item[i] = j
            unassigned -= 1
            prices[j] = bid_amount[j]
    return bidder_item, rounds


def _eps_final(C: np.ndarray, config: AuctionConfig) -> float:
    n = C.shape[0]
    mean_cost = float(C.mean())
    if mean_cost == 0.0:
        return 0.0
    return config.eps_rel * mean_cost / (n if config.per_point else 1)


def auction_assign(X, Y, config: AuctionConfig | None = None, metric: str = "l1", C=None) -> Assignment:
    """Approximate min-cost bijection X -> Y by the auction algorithm with eps-scaling.

    The returned total cost is at most optimum + n * eps_final.
    """
    config = config or AuctionConfig()
    if C is None:
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if X.ndim != 2 or Y.ndim != 2:
            raise ValueError("point sets must be 2-d arrays (n, d)")
        if len(X) != len(Y):
            raise ValueError(f"auction needs equal set sizes, got {len(X)} and {len(Y)}")
        if len(X) == 0:
            raise ValueError("empty point sets")
        C = cost_matrix(X, Y, metric)
    C = np.ascontiguousarray(C, dtype=np.float64)
    n = C.shape[0]
    eps_final = _eps_final(C, config)
    if eps_final == 0.0:
        # all costs zero: any bijection is optimal
        perm = np.arange(n)
        return Assignment(perm, 0.0, 0.0, 0, 0.0, [0.0], [0.0])

    schedule = [eps_final]
    if config.scaling:
        eps = config.initial_fraction * float(C.max())
        while eps > eps_final * config.scale_factor:
            schedule.insert(-1, eps)
            eps /= config.scale_factor
    prices = np.zeros(n)
    total_rounds = 0
    phase_costs: list[float] = []
    rows = np.arange(n)
    for eps in schedule:
        perm, rounds = _auction_phase(C, prices, eps, config.max_rounds - total_rounds)
        if rounds < 0:
            raise AuctionError(
                f"auction exceeded {config.max_rounds} rounds (n={n}, eps={eps:.3g}, "
                f"phase {len(phase_costs) + 1}/{len(schedule)}, max cost {C.max():.3g})")
        total_rounds += rounds
        phase_costs.append(math.fsum(C[rows, perm]))
    total = phase_costs[-1]
    return Assignment(perm, total, total / n, total_rounds, eps_final, phase_costs, schedule)


def hungarian_assign(X=None, Y=None, metric: str = "l1", C=None, max_size: int = 512) -> Assignment:
    """Exact min-cost assignment via shortest augmenting paths, O(n^3)."""
    if C is None:
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if len(X) != len(Y):
            raise ValueError(f"assignment needs equal set sizes, got {len(X)} and {len(Y)}")
        C = cost_matrix(X, Y, metric)
    C = np.asarray(C, dtype=np.float64)
    n = C.shape[0]
    if C.shape != (n, n):
        raise ValueError(f"cost matrix must be square, got {C.shape}")
    if n > max_size:
        raise ValueError(f"hungarian oracle is capped at n={max_size}, got {n}")
    if n == 0:
        raise ValueError("empty point sets")
    # 1-based potentials; column 0 is a virtual source
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_col = np.zeros(n + 1, dtype=np.int64)   # match_col[j] = row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[match_col[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    perm[match_col[1:] - 1] = np.arange(n)
    perm = _exact_polish(C, perm)
    total = math.fsum(C[np.arange(n), perm])
    return Assignment(perm, total, total / n)


def _exact_costs(C: np.ndarray) -> np.ndarray:
    """C as Python ints on a common power-of-two scale, so sums are exact."""
    ratios = [float(c).as_integer_ratio() for c in C.ravel()]
    den = max(d for _, d in ratios)
    return np.array([num * (den // d) for num, d in ratios], dtype=object).reshape(C.shape)


def _exact_polish(C: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Cancel improving cyclic exchanges in exact arithmetic.

    Float potentials can settle on an assignment a few ulps above the true optimum
    when costs tie. Bellman-Ford over the exchange graph (edge i -> k: row i takes
    the column of row k) finds any remaining negative cycle.
    """
    n = len(perm)
    W = _exact_costs(C)
    rows = np.arange(n)
    perm = perm.copy()
    while True:
        w = W[:, perm] - W[rows, perm][None, :]
        dist = np.zeros(n, dtype=object)
        pred = rows.copy()
        changed = None
        for _ in range(n + 1):
            cand = dist[:, None] + w
            best = np.argmin(cand, axis=0)
            new = cand[best, rows]
            changed = np.nonzero(new < dist)[0]
            if changed.size == 0:
                return perm
            pred[changed] = best[changed]
            dist[changed] = new[changed]
        x = int(changed[0])
        for _ in range(n):
            x = int(pred[x])
        cycle = [x]
        y = int(pred[x])
        while y != x:
            cycle.append(y)
            y = int(pred[y])
        gain = sum(w[pred[k], k] for k in cycle)
        if gain >= 0:
            raise AssertionError("exchange cycle is not improving")
        new_perm = perm.copy()
        for k in cycle:
            new_perm[pred[k]] = perm[k]
        perm = new_perm


def w_upper(X, Y, config: AuctionConfig | None = None, metric: str = "l1") -> float:
    """Average matched cost of the auction assignment; never below the exact value."""
    return auction_assign(X, Y, config, metric).average


def batch_assign(real: np.ndarray, fake: np.ndarray, config: AuctionConfig | None = None,
                 metric: str = "l1") -> tuple[np.ndarray, np.ndarray]:
    """Auction per object for batched sets (b, n, d); returns (perms, average costs)."""
    C = cost_matrix(fake, real, metric)
    perms = np.empty(C.shape[:2], dtype=np.int64)
    avgs = np.empty(C.shape[0])
    for k in range(C.shape[0]):
        a = auction_assign(None, None, config, metric, C=C[k])
        perms[k] = a.perm
        avgs[k] = a.average
    return perms, avgs
