"""Tile-coded bandit ensemble that adapts the sampling distribution over the index box.

A bandit partitions the box into *blocks* (width ``acc``) that it scores and
samples from, and into *tiles* (width ``ta``, offset ``to``) that carry the
learned weights.  A block's value is the mean weight of the tiles its interval
touches; its score is the z-scored value plus a UCB bonus.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .policy import IndexPoint, SEARCH_HIGH, SEARCH_LOW, index_to_search, search_to_index

SIGMA_GUARD = 1e-12
MODES = ("argmax", "random")


def _count(width: float, low: float, high: float) -> int:
    n = (high - low) / width
    return max(1, int(math.ceil(n - 1e-12)))


class TileBandit:
    """One tile-coded bandit over a box ``[low, high]`` (any dimension)."""

    def __init__(self, mode: str, low, high, lr: float, d: int, acc, ta, to, ucb_c: float = 1.0):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.low = np.atleast_1d(np.asarray(low, dtype=float))
        self.high = np.atleast_1d(np.asarray(high, dtype=float))
        dims = len(self.low)
        self.acc = np.broadcast_to(np.asarray(acc, dtype=float), (dims,)).copy()
        self.ta = np.broadcast_to(np.asarray(ta, dtype=float), (dims,)).copy()
        self.to = np.broadcast_to(np.asarray(to, dtype=float), (dims,)).copy()
        if (self.low >= self.high).any():
            raise ValueError("need low < high in every dimension")
        width = self.high - self.low
        if (self.ta <= 0).any() or (self.ta > width + 1e-12).any():
            raise ValueError("tile width must satisfy 0 < ta <= high - low")
        if (self.acc <= 0).any() or (self.acc > width + 1e-12).any():
            raise ValueError("block width must satisfy 0 < acc <= high - low")
        if (self.to < 0).any():
            raise ValueError("tile offset must be >= 0")
        if lr <= 0 or d < 1:
            raise ValueError("need lr > 0 and d >= 1")
        self.lr = float(lr)
        self.d = int(d)
        self.ucb_c = float(ucb_c)
        self.tile_shape = tuple(_count(t, lo, hi) for t, lo, hi in zip(self.ta, self.low, self.high))
        self.block_shape = tuple(_count(a, lo, hi) for a, lo, hi in zip(self.acc, self.low, self.high))
        self.w = np.zeros(self.tile_shape)
        self.N = np.zeros(self.tile_shape, dtype=np.int64)
        # per-dimension block -> tile incidence
        self._incidence = [self._dim_incidence(k) for k in range(dims)]
        self._tiles_per_block = np.ones(self.block_shape)
        for k, inc in enumerate(self._incidence):
            shape = [1] * dims
            shape[k] = -1
            self._tiles_per_block = self._tiles_per_block * inc.sum(axis=1).reshape(shape)
        self._block_value = np.zeros(self.block_shape)
        self._block_count = np.zeros(self.block_shape)
        self._inv_tiles = (1.0 / self._tiles_per_block).ravel()
        self._updates = 0
        self._flat_cache: dict = {}
        # blocks meeting a tile form a contiguous run per dimension
        self._tile_blocks = []
        for inc in self._incidence:
            runs = []
            for j in range(inc.shape[1]):
                nz = np.flatnonzero(inc[:, j])
                runs.append(slice(int(nz[0]), int(nz[-1]) + 1) if len(nz) else slice(0, 0))
            self._tile_blocks.append(runs)
        self._geom = [(float(l), float(h), float(a), float(t), float(o), nt, nb) for l, h, a, t, o, nt, nb in
                      zip(self.low, self.high, self.acc, self.ta, self.to, self.tile_shape, self.block_shape)]

    @property
    def dims(self) -> int:
        return len(self.low)

    @property
    def n_blocks(self) -> int:
        return int(np.prod(self.block_shape))

    # -- geometry ---------------------------------------------------------

    def _tile_1d(self, k: int, x: float) -> int:
        lo, hi = self.low[k], self.high[k]
        y = min(max(x - self.to[k], lo), hi)
        return min(int(math.floor((y - lo) / self.ta[k])), self.tile_shape[k] - 1)

    def _tile_1d_left_limit(self, k: int, x: float) -> int:
        """Tile index of points just below ``x``."""
        lo, hi = self.low[k], self.high[k]
        y = x - self.to[k]
        if y <= lo:
            return 0
        if y > hi:
            return self._tile_1d(k, x)
        q = (y - lo) / self.ta[k]
        return min(max(int(math.ceil(q)) - 1, 0), self.tile_shape[k] - 1)

    def _block_interval(self, k: int, b: int):
        lo = self.low[k] + b * self.acc[k]
        return lo, min(lo + self.acc[k], self.high[k])

    def _dim_incidence(self, k: int) -> np.ndarray:
        inc = np.zeros((self.block_shape[k], self.tile_shape[k]))
        for b in range(self.block_shape[k]):
            lo, hi = self._block_interval(k, b)
            j_lo = self._tile_1d(k, lo)
            j_hi = self._tile_1d_left_limit(k, hi)
            inc[b, j_lo:max(j_lo, j_hi) + 1] = 1.0
        return inc

    def tile_of(self, x) -> tuple:
        x = np.atleast_1d(np.asarray(x, dtype=float)).tolist()
        out = []
        for xk, (lo, hi, _, ta, to, nt, _) in zip(x, self._geom):
            y = min(max(xk - to, lo), hi)
            out.append(min(int(math.floor((y - lo) / ta)), nt - 1))
        return tuple(out)

    def block_of(self, x) -> tuple:
        x = np.atleast_1d(np.asarray(x, dtype=float)).tolist()
        out = []
        for xk, (lo, hi, acc, _, _, _, nb) in zip(x, self._geom):
            y = min(max(xk, lo), hi)
            out.append(min(int(math.floor((y - lo) / acc)), nb - 1))
        return tuple(out)

    def _block_index(self, block) -> tuple:
        block = tuple(np.atleast_1d(block).tolist()) if not isinstance(block, tuple) else block
        if len(block) == 1 and self.dims > 1:
            block = np.unravel_index(block[0], self.block_shape)
        if len(block) != self.dims or any(not 0 <= b < n for b, n in zip(block, self.block_shape)):
            raise IndexError(f"block {block} outside grid {self.block_shape}")
        return tuple(int(b) for b in block)

    def block_tiles(self, block) -> list:
        """All tile multi-indices whose region meets the block (Cartesian product over dims)."""
        block = self._block_index(block)
        per_dim = [np.flatnonzero(self._incidence[k][b]).tolist() for k, b in enumerate(block)]
        grids = np.meshgrid(*per_dim, indexing="ij")
        return [tuple(int(g) for g in t) for t in zip(*(g.ravel() for g in grids))]

    def evaluate_block(self, block) -> float:
        tiles = self.block_tiles(block)
        return float(np.mean([self.w[t] for t in tiles]))

    def block_values(self) -> np.ndarray:
        """Mean tile weight for every block, recomputed from ``w``."""
        v = self.w
        for k, inc in enumerate(self._incidence):
            v = np.moveaxis(np.tensordot(inc, v, axes=([1], [k])), 0, k)
        return v / self._tiles_per_block

    def block_counts(self) -> np.ndarray:
        n = self.N.astype(float)
        for k, inc in enumerate(self._incidence):
            n = np.moveaxis(np.tensordot(inc, n, axes=([1], [k])), 0, k)
        return n

    def load_state(self, w, N) -> None:
        """Replace tile weights and counts, rebuilding the cached block statistics."""
        w = np.asarray(w, dtype=float).reshape(self.tile_shape)
        N = np.asarray(N).reshape(self.tile_shape)
        if not np.all(np.isfinite(w)) or (N < 0).any() or not np.array_equal(N, np.round(N)):
            raise ValueError("need finite weights and non-negative integer counts")
        self.w[...] = w
        self.N[...] = N
        # in-place so ensemble buffer views stay attached
        self._block_value[...] = self.block_values()
        self._block_count[...] = self.block_counts()
        self._updates = int(self.N.sum())

    # -- learning ---------------------------------------------------------

    def _affected_blocks(self, tile: tuple):
        return tuple(self._tile_blocks[k][j] for k, j in enumerate(tile))

    def _stage_update(self, x: list, g: float):
        """Apply the tile part of an update; return the block cells and value increments."""
        block, tile = [], []
        for xk, (lo, hi, acc, ta, to, nt, nb) in zip(x, self._geom):
            y = min(max(xk, lo), hi)
            block.append(min(int((y - lo) // acc), nb - 1))
            y = min(max(xk - to, lo), hi)
            tile.append(min(int((y - lo) // ta), nt - 1))
        block, tile = tuple(block), tuple(tile)
        delta = self.lr * (g - float(self._block_value[block]))
        self.w[tile] += delta
        self.N[tile] += 1
        self._updates += 1
        flat = self._flat_cache.get(tile)
        if flat is None:
            ix = self._affected_blocks(tile)
            flat = np.ravel_multi_index(np.mgrid[ix].reshape(self.dims, -1), self.block_shape)
            self._flat_cache[tile] = flat
        return flat, delta * self._inv_tiles[flat]

    def update(self, x, g: float) -> None:
        if not math.isfinite(g):
            raise ValueError(f"bandit target must be finite, got {g}")
        flat, inc = self._stage_update(np.atleast_1d(x).tolist(), g)
        self._block_value.reshape(-1)[flat] += inc
        self._block_count.reshape(-1)[flat] += 1.0

    def scores(self) -> np.ndarray:
        v = self._block_value.ravel()
        n = v.size
        centered = v - v.sum() / n
        sigma = math.sqrt(float(centered @ centered) / n)
        z = centered / sigma if sigma >= SIGMA_GUARD else np.zeros(n)
        # every update adds one tile count, so sum(N) == number of updates
        bonus = (self.ucb_c * math.sqrt(math.log1p(self._updates))) / np.sqrt(1.0 + self._block_count.ravel())
        return z + bonus

    def sample_candidates(self, rng: np.random.Generator) -> np.ndarray:
        """``d`` points, one uniformly inside each chosen block; shape ``(d, dims)``."""
        n = self.n_blocks
        if self.d > n:
            raise ValueError(f"d={self.d} exceeds the number of blocks ({n})")
        s = self.scores()
        if self.mode == "argmax":
            chosen = _top_k_lowest_index(s, self.d)
        else:
            chosen = _softmax_without_replacement(s, self.d, rng)
        blocks = np.array(np.unravel_index(chosen, self.block_shape)).T
        lo = self.low + blocks * self.acc
        hi = np.minimum(lo + self.acc, self.high)
        return lo + rng.random(lo.shape) * (hi - lo)


def _softmax_without_replacement(s: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``k`` distinct indices sequentially, each with probability softmax(s) over the rest.

    Redrawing from the full distribution until an unused index appears is an
    exact way to sample the conditional; the cumulative sums are rebuilt only
    if the used mass makes rejection slow.
    """
    p = np.exp(s - s.max())
    c = np.cumsum(p)
    out: list = []
    tries = 0
    while len(out) < k:
        j = min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(p) - 1)
        while p[j] == 0.0:      # zero-width step hit through rounding
            j -= 1
        if j not in out:
            out.append(j)
            tries = 0
            continue
        tries += 1
        if tries >= 8:
            p[out] = 0.0
            c = np.cumsum(p)
            tries = 0
    return np.array(out)


def _top_k_lowest_index(s: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries; ties go to the lowest index."""
    if k > 8:
        return np.argsort(-s, kind="stable")[:k]
    s = s.copy()
    out = np.empty(k, dtype=int)
    for i in range(k):
        out[i] = np.argmax(s)
        s[out[i]] = -np.inf
    return out


def tile_of(bandit: TileBandit, x) -> tuple:
    return bandit.tile_of(x)


def block_tiles(bandit: TileBandit, block) -> list:
    return bandit.block_tiles(block)


def evaluate_block(bandit: TileBandit, block) -> float:
    return bandit.evaluate_block(block)


def score_blocks(bandit: TileBandit) -> np.ndarray:
    return bandit.scores()


@dataclass
class BanditConfig:
    n_bandits: int = 7
    n_candidates: int = 3
    learning_rates: Sequence[float] = (0.05, 0.1, 0.2)
    tile_widths: Sequence[int] = (2, 3, 4)
    block_widths: Sequence[int] = (2, 3, 4)
    offset_range: tuple = (0.0, 60.0)
    # per-dimension unit for widths/offsets: [1/tau1, 1/tau2, eps]
    unit: Sequence[float] = (1.0, 1.0, 0.1)
    modes: Sequence[str] = MODES
    ucb_c: float = 1.0


class BanditEnsemble:
    """``M`` independently configured bandits sharing one sampling/update owner.

    ``dims`` selects the searched coordinates: 3 for ``(tau1, tau2, eps)``,
    1 for a single temperature (``eps`` fixed at 1).
    """

    def __init__(self, bandits: Sequence[TileBandit], dims: int = 3):
        if len(bandits) < 1:
            raise ValueError("need at least one bandit")
        if dims not in (1, 3):
            raise ValueError("dims must be 1 or 3")
        self.bandits = list(bandits)
        self.dims = dims
        self._lock = threading.Lock()
        # block statistics of all members live in one buffer so an ensemble
        # update is a single scatter
        sizes = [b.n_blocks for b in self.bandits]
        self._offsets = np.cumsum([0] + sizes)
        self._values = np.concatenate([b._block_value.ravel() for b in self.bandits])
        self._counts = np.concatenate([b._block_count.ravel() for b in self.bandits])
        for b, lo, hi in zip(self.bandits, self._offsets[:-1], self._offsets[1:]):
            b._block_value = self._values[lo:hi].reshape(b.block_shape)
            b._block_count = self._counts[lo:hi].reshape(b.block_shape)
        self._uniform_d = len({b.d for b in self.bandits}) == 1

    @classmethod
    def create(cls, config: BanditConfig, rng: np.random.Generator, dims: int = 3) -> "BanditEnsemble":
        low, high = SEARCH_LOW[:dims], SEARCH_HIGH[:dims]
        unit = np.asarray(config.unit[:dims], dtype=float)
        bandits = []
        for _ in range(config.n_bandits):
            mode = config.modes[rng.integers(len(config.modes))]
            lr = config.learning_rates[rng.integers(len(config.learning_rates))]
            ta = unit * rng.choice(config.tile_widths, size=dims)
            acc = unit * rng.choice(config.block_widths, size=dims)
            to = unit * rng.uniform(*config.offset_range, size=dims)
            bandits.append(TileBandit(mode, low, high, lr, config.n_candidates, acc, ta, to, config.ucb_c))
        return cls(bandits, dims)

    def to_index(self, x) -> IndexPoint:
        x = np.asarray(x, dtype=float)
        if self.dims == 1:
            lam = search_to_index([x[0], 0.0, 1.0])
            return IndexPoint(lam.tau1, lam.tau1, 1.0)
        return search_to_index(x)

    def to_search(self, lam: IndexPoint) -> np.ndarray:
        return index_to_search(lam)[: self.dims]

    @property
    def total_count(self) -> int:
        return int(sum(b.N.sum() for b in self.bandits))

    def candidates(self, rng: np.random.Generator) -> np.ndarray:
        """All ``M * d`` candidates, shape ``(M * d, dims)``."""
        with self._lock:
            return np.concatenate([b.sample_candidates(rng) for b in self.bandits])

    def sample(self, rng: np.random.Generator) -> IndexPoint:
        """One candidate drawn uniformly from the ``M * d`` pool.

        Picking the member first (weighted by its ``d``) and then one of its
        candidates has the same law as pooling, and only scores one member.
        """
        if self._uniform_d:
            m = int(rng.integers(len(self.bandits)))
        else:
            sizes = np.array([b.d for b in self.bandits], dtype=float)
            m = int(rng.choice(len(self.bandits), p=sizes / sizes.sum()))
        with self._lock:
            cands = self.bandits[m].sample_candidates(rng)
        return self.to_index(cands[rng.integers(len(cands))])

    def update(self, lam: IndexPoint, g: float) -> None:
        if not math.isfinite(g):
            raise ValueError(f"episode return must be finite, got {g}")
        x = self.to_search(lam).tolist()
        with self._lock:
            staged = [b._stage_update(x, g) for b in self.bandits]
            flat = np.concatenate([f + off for (f, _), off in zip(staged, self._offsets)])
            self._values[flat] += np.concatenate([inc for _, inc in staged])
            self._counts[flat] += 1.0


def ensemble_sample(ensemble: BanditEnsemble, rng: np.random.Generator) -> IndexPoint:
    return ensemble.sample(rng)


def ensemble_update(ensemble: BanditEnsemble, lam: IndexPoint, g: float) -> None:
    ensemble.update(lam, g)
