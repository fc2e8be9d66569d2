"""Actor/learner orchestration of the sample -> RL update -> distribution update loop.

Two execution modes share the same actor and learner code:

* ``deterministic`` (default): one thread, actors stepped round-robin, one
  seeded RNG stream per role.  Logs are byte-identical for equal seeds.
* ``threaded``: one thread per actor plus the learner on the caller's thread,
  connected by a bounded queue.
"""
from __future__ import annotations

import bisect
import csv
import io
import json
import math
import queue
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from .bandits import BanditConfig, BanditEnsemble
from .envs import TabularMdp, make_chain_env, make_grid_env, make_random_mdp
from .learner import LossWeights, SampleSegment, apply_sgd, batch_loss
from .policy import IndexPoint, PolicyParams, SnapshotStore, inverse_temperature, mixture_policy

MODES = ("gdi_i3", "gdi_h3", "gdi_i1", "fixed_lambda")
LOG_COLUMNS = ("frame", "episode", "actor_id", "param_version", "inv_tau1", "inv_tau2",
               "epsilon", "return_raw", "return_shaped", "coverage")


@dataclass
class EnvConfig:
    kind: str = "chain"
    length: int = 8
    slip: float = 0.1
    goal_reward: float = 10.0
    trap_reward: float = 1.0
    width: int = 4
    height: int = 4
    n_states: int = 6
    n_actions: int = 3
    gamma: float = 0.997
    max_steps: int = 200


@dataclass
class RunConfig:
    mode: str = "gdi_i3"
    total_frames: int = 200_000
    segment_length: int = 32
    batch_size: int = 4
    d_push: int = 25
    d_pull: int = 64
    n_actors: int = 4
    replay: int = 2
    step_size: float = 0.05
    seed: int = 0
    threaded: bool = False
    queue_batches: int = 4
    fixed_lambda: tuple = (1.0, 0.0, 1.0)   # inverse temperatures and epsilon
    env: EnvConfig = field(default_factory=EnvConfig)
    bandit: BanditConfig = field(default_factory=BanditConfig)
    learner: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("segment_length", "batch_size", "d_push", "d_pull", "n_actors", "replay", "queue_batches"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_frames < self.segment_length:
            raise ValueError("total_frames must be at least one segment")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if len(self.fixed_lambda) != 3:
            raise ValueError("fixed_lambda needs [1/tau1, 1/tau2, epsilon]")
        if self.env.max_steps < 1:
            raise ValueError("env.max_steps must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        nested = {"env": EnvConfig, "bandit": BanditConfig, "learner": LossWeights}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known - {"seeds"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data.pop("seeds", None)
        for key, typ in nested.items():
            if key in data:
                sub = data[key]
                allowed = {f.name for f in fields(typ)}
                bad = set(sub) - allowed
                if bad:
                    raise ValueError(f"unknown {key} keys: {sorted(bad)}")
                data[key] = typ(**{k: tuple(v) if isinstance(v, list) else v for k, v in sub.items()})
        if "fixed_lambda" in data:
            data["fixed_lambda"] = tuple(data["fixed_lambda"])
        return cls(**data)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def load_config(path) -> tuple:
    """Read a JSON run config; returns ``(RunConfig, seeds)``."""
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("config must be a JSON object")
    seeds = data.get("seeds", [data.get("seed", 0)])
    return RunConfig.from_dict(data), [int(s) for s in seeds]


def make_env(cfg: EnvConfig, rng: Optional[np.random.Generator] = None) -> TabularMdp:
    if cfg.kind == "chain":
        return make_chain_env(cfg.length, cfg.slip, goal_reward=cfg.goal_reward,
                              trap_reward=cfg.trap_reward, gamma=cfg.gamma)
    if cfg.kind == "grid":
        return make_grid_env(cfg.width, cfg.height, goal_reward=cfg.goal_reward, gamma=cfg.gamma)
    if cfg.kind == "random":
        return make_random_mdp(cfg.n_states, cfg.n_actions, rng or np.random.default_rng(0), gamma=cfg.gamma)
    raise ValueError(f"unknown env kind {cfg.kind!r}")


@dataclass
class EpisodeRecord:
    frame: int
    episode: int
    actor_id: int
    param_version: int
    inv_tau1: float
    inv_tau2: float
    epsilon: float
    return_raw: float
    return_shaped: float
    coverage: float

    def row(self) -> list:
        return [repr(getattr(self, c)) for c in LOG_COLUMNS]


@dataclass
class TrainingLog:
    episodes: List[EpisodeRecord] = field(default_factory=list)
    updates: List[dict] = field(default_factory=list)
    n_states: int = 0
    visited: set = field(default_factory=set)
    frames: int = 0
    published_versions: List[int] = field(default_factory=list)
    controller_updates: int = 0
    bandit_draws: int = 0
    segments: List[SampleSegment] = field(default_factory=list)
    final_params: Optional[PolicyParams] = None
    store: Optional[SnapshotStore] = None

    def coverage(self) -> float:
        return len(self.visited) / self.n_states if self.n_states else 0.0

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for rec in self.episodes:
            w.writerow(rec.row())
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def final_window_return(self, fraction: float = 0.1) -> float:
        """Mean raw return of episodes finishing in the last ``fraction`` of frames."""
        if not self.episodes:
            return float("nan")
        cut = self.frames * (1.0 - fraction)
        window = [e.return_raw for e in self.episodes if e.frame >= cut]
        return float(np.mean(window)) if window else float("nan")

    def summary(self) -> dict:
        heads = sorted({k for u in self.updates for k in u if k.startswith("head")})
        return {
            "frames": self.frames,
            "episodes": len(self.episodes),
            "final_mean_return": self.final_window_return(),
            "coverage": self.coverage(),
            "updates": len(self.updates),
            "published_versions": len(self.published_versions),
            "loss_streams": {h: [u[h] for u in self.updates] for h in heads},
        }


def state_coverage(log: TrainingLog) -> float:
    return log.coverage()


class Controller:
    """Owner of the index distribution; serializes sampling and updates."""

    def __init__(self, config: RunConfig, rng: np.random.Generator):
        self.rng = rng
        self.mode = config.mode
        self.updates = 0
        self._lock = threading.Lock()
        self.fixed = IndexPoint.from_inverse(*config.fixed_lambda)
        self.ensemble: Optional[BanditEnsemble] = None
        if self.mode != "fixed_lambda":
            dims = 1 if self.mode == "gdi_i1" else 3
            self.ensemble = BanditEnsemble.create(config.bandit, rng, dims=dims)

    def sample(self) -> IndexPoint:
        if self.ensemble is None:
            return self.fixed
        with self._lock:
            return self.ensemble.sample(self.rng)

    def update(self, lam: IndexPoint, g: float) -> None:
        if self.ensemble is None:
            return
        with self._lock:
            self.ensemble.update(lam, g)
            self.updates += 1


class SinkClosed(Exception):
    pass


class SampleQueue:
    """Bounded FIFO of segments; producers block when it is full."""

    def __init__(self, capacity: int):
        self._q: "queue.Queue" = queue.Queue(maxsize=capacity)
        self._closed = threading.Event()

    def put(self, item, timeout: float = 0.05) -> None:
        while True:
            if self._closed.is_set():
                raise SinkClosed
            try:
                self._q.put(item, timeout=timeout)
                return
            except queue.Full:
                continue

    def get(self, timeout: float = 0.05):
        return self._q.get(timeout=timeout)

    def close(self) -> None:
        self._closed.set()

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def empty(self) -> bool:
        return self._q.empty()


class FrameBudget:
    def __init__(self, total: int):
        self.total = total
        self.used = 0
        self._lock = threading.Lock()

    def claim(self, want: int) -> int:
        with self._lock:
            n = max(0, min(want, self.total - self.used))
            self.used += n
            return n

    def refund(self, n: int) -> None:
        """Return claimed but unused frames (an episode ended early)."""
        with self._lock:
            self.used -= n


class Actor:
    """One actor: owns an env instance, its RNG stream and the episode state."""

    def __init__(self, actor_id: int, env: TabularMdp, store: SnapshotStore, controller: Controller,
                 config: RunConfig, rng: np.random.Generator, log: TrainingLog, log_lock=None):
        self.id = actor_id
        self.env = env
        self.store = store
        self.controller = controller
        self.config = config
        self.rng = rng
        self.log = log
        self.log_lock = log_lock or threading.Lock()
        self._cum_p = [[list(np.cumsum(env.transition[s, a])) for a in range(env.n_actions)]
                       for s in range(env.n_states)]
        self._reward = env.reward.tolist()
        self._terminal = env.terminal.tolist()
        self._buf: list = []
        self._pos = 0
        self.snapshot = store.fetch()
        self.steps_since_pull = 0
        self._start_episode()

    def _uniform(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self.rng.random(4096).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u

    def _refresh_policy(self) -> None:
        self.table = mixture_policy(self.snapshot.params, self.lam, slice(None))
        self._cum_pi = np.cumsum(self.table, axis=1).tolist()

    def _start_episode(self) -> None:
        self.lam = self.controller.sample()
        u = self._uniform()
        self.state = bisect.bisect_right(np.cumsum(self.env.initial_dist).tolist(), u)
        self.state = min(self.state, self.env.n_states - 1)
        self.ep_steps = 0
        self.ep_raw = 0.0
        self.ep_shaped = 0.0
        with self.log_lock:
            self.log.visited.add(self.state)
        self._refresh_policy()

    def pull(self) -> None:
        snap = self.store.fetch()
        self.steps_since_pull = 0
        if snap.version != self.snapshot.version:
            self.snapshot = snap
            self._refresh_policy()

    def collect(self, max_len: int, frame_base: int) -> SampleSegment:
        """Act for up to ``max_len`` steps; stops early at the end of an episode."""
        n_a = self.env.n_actions
        d_pull = self.config.d_pull
        max_steps = self.config.env.max_steps
        states, actions, raw, dones, probs, versions = [], [], [], [], [], []
        version = self.snapshot.version
        lam = self.lam
        ended = False
        for _ in range(max_len):
            if self.steps_since_pull >= d_pull:
                self.pull()
            s = self.state
            a = min(bisect.bisect_right(self._cum_pi[s], self._uniform()), n_a - 1)
            s2 = min(bisect.bisect_right(self._cum_p[s][a], self._uniform()), self.env.n_states - 1)
            r = self._reward[s][a]
            done = self._terminal[s2]
            states.append(s)
            actions.append(a)
            raw.append(r)
            dones.append(done)
            probs.append(self.table[s])
            versions.append(self.snapshot.version)
            self.state = s2
            self.steps_since_pull += 1
            self.ep_steps += 1
            self.ep_raw += r
            if s2 not in self.log.visited:
                with self.log_lock:
                    self.log.visited.add(s2)
            if done or self.ep_steps >= max_steps:
                ended = True
                break
        seg = SampleSegment.from_raw(states, actions, raw, dones, probs, self.state,
                                     lam=lam, version=version, actor_id=self.id,
                                     step_versions=np.array(versions))
        self.ep_shaped += float(seg.rewards.sum())
        if ended:
            self._finish_episode(frame_base + len(seg))
        return seg

    def _finish_episode(self, frame: int) -> None:
        g = self.ep_raw
        self.controller.update(self.lam, g)
        with self.log_lock:
            self.log.episodes.append(EpisodeRecord(
                frame=frame, episode=len(self.log.episodes), actor_id=self.id,
                param_version=self.snapshot.version, inv_tau1=inverse_temperature(self.lam.tau1),
                inv_tau2=inverse_temperature(self.lam.tau2), epsilon=self.lam.epsilon, return_raw=g,
                return_shaped=self.ep_shaped, coverage=self.log.coverage()))
        self._start_episode()


class Learner:
    """Consumes batches, applies the RL update and publishes snapshots every ``d_push`` updates."""

    def __init__(self, params: PolicyParams, store: SnapshotStore, config: RunConfig, log: TrainingLog):
        self.params = params
        self.store = store
        self.config = config
        self.log = log
        self.updates = 0

    def update(self, batch: List[SampleSegment]) -> None:
        if not batch:
            return
        for _ in range(self.config.replay):
            res = batch_loss(self.params, batch, self.config.learner)
            apply_sgd(self.params, res.grads, self.config.step_size)
        comps = res.components
        self.updates += 1
        rec = {"update": self.updates, "version": self.params.version}
        rec.update(comps)
        self.log.updates.append(rec)
        if self.updates % self.config.d_push == 0:
            self.publish()

    def publish(self) -> None:
        self.store.publish(self.params)
        self.log.published_versions.append(self.params.version)


def _setup(config: RunConfig, keep_history: bool = False):
    seq = np.random.SeedSequence(config.seed)
    streams = [np.random.default_rng(s) for s in seq.spawn(config.n_actors + 2)]
    env_rng, ctrl_rng, actor_rngs = streams[0], streams[1], streams[2:]
    env = make_env(config.env, env_rng)
    log = TrainingLog(n_states=env.n_states)
    params = PolicyParams.create(env.n_states, env.n_actions, isomorphic=config.mode != "gdi_h3")
    store = SnapshotStore(keep_history=keep_history)
    learner = Learner(params, store, config, log)
    learner.publish()
    controller = Controller(config, ctrl_rng)
    lock = threading.Lock()
    actors = [Actor(i, env, store, controller, config, actor_rngs[i], log, lock)
              for i in range(config.n_actors)]
    return env, log, learner, controller, actors


def _run_deterministic(config: RunConfig, keep_segments: bool = False) -> TrainingLog:
    env, log, learner, controller, actors = _setup(config, keep_history=keep_segments)
    log.store = learner.store if keep_segments else None
    budget = FrameBudget(config.total_frames)
    batch: List[SampleSegment] = []
    done = False
    while not done:
        for actor in actors:
            n = budget.claim(config.segment_length)
            if n == 0:
                done = True
                break
            seg = actor.collect(n, budget.used - n)
            budget.refund(n - len(seg))
            log.frames += len(seg)
            if keep_segments:
                log.segments.append(seg)
            batch.append(seg)
            if len(batch) == config.batch_size:
                learner.update(batch)
                batch = []
    learner.update(batch)
    log.controller_updates = controller.updates
    log.bandit_draws = controller.ensemble.total_count if controller.ensemble is not None else 0
    log.final_params = learner.params
    return log


def actor_loop(actor: Actor, sink: SampleQueue, budget: FrameBudget, frame_lock: threading.Lock,
               log: TrainingLog) -> None:
    """Collect segments until the frame budget is spent or the sink closes."""
    try:
        while True:
            n = budget.claim(actor.config.segment_length)
            if n == 0:
                return
            with frame_lock:
                base = log.frames
            seg = actor.collect(n, base)
            budget.refund(n - len(seg))
            with frame_lock:
                log.frames += len(seg)
            sink.put(seg)
    except SinkClosed:
        return


def learner_loop(source: SampleQueue, learner: Learner, batch_size: int, producers_alive) -> None:
    """Drain ``source`` into batches until producers finish and the queue is empty."""
    batch: List[SampleSegment] = []
    while True:
        try:
            batch.append(source.get())
        except queue.Empty:
            if not producers_alive() and source.empty():
                break
            continue
        if len(batch) == batch_size:
            learner.update(batch)
            batch = []
    learner.update(batch)


def _run_threaded(config: RunConfig) -> TrainingLog:
    env, log, learner, controller, actors = _setup(config)
    budget = FrameBudget(config.total_frames)
    sink = SampleQueue(config.queue_batches * config.batch_size)
    frame_lock = threading.Lock()
    threads = [threading.Thread(target=actor_loop, args=(a, sink, budget, frame_lock, log), daemon=True)
               for a in actors]
    for t in threads:
        t.start()
    try:
        learner_loop(sink, learner, config.batch_size, lambda: any(t.is_alive() for t in threads))
    finally:
        sink.close()
        for t in threads:
            t.join()
    log.episodes.sort(key=lambda e: (e.frame, e.actor_id))
    log.controller_updates = controller.updates
    log.bandit_draws = controller.ensemble.total_count if controller.ensemble is not None else 0
    log.final_params = learner.params
    return log


def run_gdi(config: RunConfig, keep_segments: bool = False) -> TrainingLog:
    config.validate()
    if config.threaded:
        return _run_threaded(config)
    return _run_deterministic(config, keep_segments)


def run_fixed_lambda(config: RunConfig, keep_segments: bool = False) -> TrainingLog:
    cfg = RunConfig.from_dict({**config.to_dict(), "mode": "fixed_lambda"})
    return run_gdi(cfg, keep_segments)


def with_overrides(config: RunConfig, **kw) -> RunConfig:
    return RunConfig.from_dict({**config.to_dict(), **kw})
