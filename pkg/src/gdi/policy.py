"""Behavior-policy space indexed by ``lambda = (tau1, tau2, epsilon)``.

Each policy mixes two tempered softmaxes over dueling advantage heads::

    pi_lambda = eps * softmax(A1 / tau1) + (1 - eps) * softmax(A2 / tau2)

The meta-controller searches over ``x = (log(1 + 1/tau1), log(1 + 1/tau2), eps)``.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

MAX_INV_TEMPERATURE = 50.0
SEARCH_LOW = np.array([0.0, 0.0, 0.0])
SEARCH_HIGH = np.array([50.0, 50.0, 1.0])


@dataclass(frozen=True)
class IndexPoint:
    """One index ``lambda``.  ``tau = math.inf`` is the uniform-policy sentinel."""

    tau1: float
    tau2: float
    epsilon: float

    def __post_init__(self):
        for tau in (self.tau1, self.tau2):
            if not tau > 0.0:
                raise ValueError(f"temperature must be > 0 or inf, got {tau}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")

    @classmethod
    def from_inverse(cls, inv_tau1: float, inv_tau2: float, epsilon: float) -> "IndexPoint":
        return cls(_inv_to_tau(inv_tau1), _inv_to_tau(inv_tau2), epsilon)

    @property
    def inv_tau1(self) -> float:
        return 1.0 / self.tau1

    @property
    def inv_tau2(self) -> float:
        return 1.0 / self.tau2

    def as_inverse(self) -> tuple:
        return (self.inv_tau1, self.inv_tau2, self.epsilon)


def _inv_to_tau(inv: float) -> float:
    if inv < 0:
        raise ValueError("inverse temperature must be >= 0")
    return math.inf if inv == 0 else 1.0 / inv


def inverse_temperature(tau: float) -> float:
    """Clamped ``1/tau``; the clamp stands in for the argmax limit."""
    if not tau > 0.0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    return min(1.0 / tau, MAX_INV_TEMPERATURE)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def tempered_softmax(logits, tau: float) -> np.ndarray:
    kappa = inverse_temperature(tau)
    logits = np.asarray(logits, dtype=float)
    if kappa == 0.0:
        return np.full(logits.shape, 1.0 / logits.shape[-1])
    return softmax(logits * kappa)


def index_to_search(lam: IndexPoint) -> np.ndarray:
    return np.array([math.log1p(lam.inv_tau1), math.log1p(lam.inv_tau2), lam.epsilon])


def search_to_index(x) -> IndexPoint:
    """Inverse of :func:`index_to_search`; coordinates outside the box are clamped."""
    x = np.clip(np.asarray(x, dtype=float), SEARCH_LOW, SEARCH_HIGH)
    taus = [math.inf if xi == 0.0 else 1.0 / math.expm1(xi) for xi in x[:2]]
    return IndexPoint(taus[0], taus[1], float(x[2]))


@dataclass
class Head:
    """Linear dueling head: ``A(s) = phi(s) @ adv``, ``V(s) = phi(s) @ value``."""

    adv: np.ndarray
    value: np.ndarray

    @classmethod
    def zeros(cls, n_features: int, n_actions: int) -> "Head":
        return cls(np.zeros((n_features, n_actions)), np.zeros(n_features))

    def copy(self) -> "Head":
        return Head(self.adv.copy(), self.value.copy())


@dataclass
class PolicyParams:
    """Parameters of both mixture heads.  Isomorphic mode shares one ``Head``."""

    head1: Head
    head2: Head
    features: np.ndarray
    version: int = 0

    @classmethod
    def create(cls, n_states: int, n_actions: int, *, isomorphic: bool = True,
               features: Optional[np.ndarray] = None, rng: Optional[np.random.Generator] = None,
               init_scale: float = 0.0) -> "PolicyParams":
        phi = np.eye(n_states) if features is None else np.asarray(features, dtype=float)
        if phi.shape[0] != n_states:
            raise ValueError("features need one row per state")

        def make():
            head = Head.zeros(phi.shape[1], n_actions)
            if rng is not None and init_scale > 0:
                head.adv += init_scale * rng.standard_normal(head.adv.shape)
                head.value += init_scale * rng.standard_normal(head.value.shape)
            return head

        h1 = make()
        return cls(h1, h1 if isomorphic else make(), phi)

    @property
    def isomorphic(self) -> bool:
        return self.head1 is self.head2

    @property
    def heads(self) -> tuple:
        return (self.head1,) if self.isomorphic else (self.head1, self.head2)

    def head(self, index: int) -> Head:
        if index not in (1, 2):
            raise ValueError("head index must be 1 or 2")
        return self.head1 if index == 1 else self.head2

    def advantages(self, index: int, states=None) -> np.ndarray:
        phi = self.features if states is None else self.features[states]
        return phi @ self.head(index).adv

    def values(self, index: int, states=None) -> np.ndarray:
        phi = self.features if states is None else self.features[states]
        return phi @ self.head(index).value

    def copy(self) -> "PolicyParams":
        h1 = self.head1.copy()
        h2 = h1 if self.isomorphic else self.head2.copy()
        return PolicyParams(h1, h2, self.features, self.version)


def centered_advantage(adv: np.ndarray, ref: Optional[np.ndarray] = None) -> np.ndarray:
    """``A - E_p[A]``; ``p`` defaults to the temperature-1 softmax of ``A`` itself."""
    p = softmax(adv) if ref is None else np.asarray(ref, dtype=float)
    return adv - (p * adv).sum(axis=-1, keepdims=True)


def dueling_q(params: PolicyParams, head: int, state):
    """Return ``(A, A_bar, V, Q)`` for one head at ``state`` (or array of states)."""
    a = params.advantages(head, state)
    v = params.values(head, state)
    a_bar = centered_advantage(a)
    return a, a_bar, v, a_bar + np.expand_dims(v, -1)


def mixture_from_advantages(adv1: np.ndarray, adv2: np.ndarray, lam: IndexPoint) -> np.ndarray:
    eps = lam.epsilon
    if eps == 1.0:
        return tempered_softmax(adv1, lam.tau1)
    if eps == 0.0:
        return tempered_softmax(adv2, lam.tau2)
    return eps * tempered_softmax(adv1, lam.tau1) + (1.0 - eps) * tempered_softmax(adv2, lam.tau2)


def mixture_policy(params: PolicyParams, lam: IndexPoint, state) -> np.ndarray:
    return mixture_from_advantages(params.advantages(1, state), params.advantages(2, state), lam)


@dataclass(frozen=True)
class Snapshot:
    params: PolicyParams

    @property
    def version(self) -> int:
        return self.params.version


class SnapshotStore:
    """Versioned, thread-safe store of immutable parameter snapshots."""

    def __init__(self, keep_history: bool = False):
        self._latest: Optional[Snapshot] = None
        self._lock = threading.Lock()
        self.published = 0
        self.history: Optional[dict] = {} if keep_history else None

    def publish(self, params: PolicyParams) -> Snapshot:
        frozen = params.copy()
        for head in frozen.heads:
            head.adv.setflags(write=False)
            head.value.setflags(write=False)
        snap = Snapshot(frozen)
        with self._lock:
            if self._latest is not None and snap.version <= self._latest.version:
                raise ValueError(
                    f"snapshot version {snap.version} does not exceed {self._latest.version}")
            self._latest = snap
            self.published += 1
            if self.history is not None:
                self.history[snap.version] = snap
        return snap

    def fetch(self) -> Snapshot:
        with self._lock:
            if self._latest is None:
                raise LookupError("no snapshot has been published")
            return self._latest


def publish_snapshot(store: SnapshotStore, params: PolicyParams) -> Snapshot:
    return store.publish(params)


def fetch_snapshot(store: SnapshotStore) -> Snapshot:
    return store.fetch()


__all__ = [
    "IndexPoint", "Head", "PolicyParams", "Snapshot", "SnapshotStore",
    "tempered_softmax", "softmax", "dueling_q", "centered_advantage", "mixture_policy",
    "mixture_from_advantages", "index_to_search", "search_to_index", "publish_snapshot",
    "fetch_snapshot", "MAX_INV_TEMPERATURE", "SEARCH_LOW", "SEARCH_HIGH",
]
