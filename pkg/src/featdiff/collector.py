"""RL-based training-data collector.

Three cooperating agents (head feature, operator, tail feature) grow the
feature space one generated column per step; every visited feature set plus
its downstream score becomes a training record.  Agents are small Q-networks
trained by one-step TD targets from an experience replay buffer.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .expr import (
    OPERATOR_NAMES,
    OPERATORS,
    FeatureExpr,
    FeatureSet,
    evaluate,
    serialize,
)
from .tabular import Dataset, downstream_score

__all__ = [
    "CollectorConfig",
    "TrainingRecord",
    "CollectResult",
    "represent_state",
    "reward",
    "step",
    "collect",
    "AgentTriple",
]

STATE_DIM = 49


@dataclass(frozen=True)
class CollectorConfig:
    episodes: int = 30
    steps: int = 8
    l_max: int = 9
    gamma: float = 0.9
    eps_start: float = 1.0
    eps_end: float = 0.1
    replay_capacity: int = 4096
    batch_size: int = 64
    lr: float = 1e-3
    hidden: int = 64
    time_limit_s: float | None = None


@dataclass(frozen=True)
class TrainingRecord:
    fs: FeatureSet
    y_raw: float
    y_norm: float = float("nan")


@dataclass
class CollectResult:
    records: list[TrainingRecord]
    baseline: float
    truncated: bool = False


def _seven_stats(x: np.ndarray, axis: int) -> np.ndarray:
    """count, std, min, max, Q1, Q2, Q3 along an axis."""
    q1, q2, q3 = np.percentile(x, [25, 50, 75], axis=axis)
    return np.stack(
        [
            np.full(q1.shape, x.shape[axis], dtype=np.float64),
            np.std(x, axis=axis),
            np.min(x, axis=axis),
            np.max(x, axis=axis),
            q1,
            q2,
            q3,
        ]
    )


def represent_state(table: np.ndarray) -> np.ndarray:
    """49-dim state: 7 column-wise statistics each summarized by 7 row-wise
    statistics over columns.  Invariant to column permutation."""
    table = np.asarray(table, dtype=np.float64)
    per_col = _seven_stats(table, axis=0)  # (7, n_cols)
    out = _seven_stats(per_col, axis=1)  # (7, 7)
    return out.reshape(STATE_DIM)


def reward(y_t: float, y_prev: float) -> float:
    """Per-step reward: downstream performance improvement."""
    return y_t - y_prev


class _QNet(nn.Module):
    def __init__(self, n_actions: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(STATE_DIM, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, n_actions),
        )

    def forward(self, x):
        return self.net(x)


class _Agent:
    def __init__(self, n_actions: int, cfg: CollectorConfig):
        self.n_actions = n_actions
        self.q = _QNet(n_actions, cfg.hidden)
        self.opt = torch.optim.Adam(self.q.parameters(), lr=cfg.lr)
        self.replay: deque = deque(maxlen=cfg.replay_capacity)
        self.cfg = cfg

    def act(self, state: np.ndarray, legal: np.ndarray, epsilon: float,
            rng: np.random.Generator) -> int:
        legal_idx = np.flatnonzero(legal)
        if rng.random() < epsilon:
            return int(legal_idx[rng.integers(len(legal_idx))])
        with torch.no_grad():
            q = self.q(torch.from_numpy(state).float().unsqueeze(0)).squeeze(0).numpy()
        q = np.where(legal, q, -np.inf)
        return int(np.argmax(q))

    def remember(self, s, a, r, s2, legal2):
        self.replay.append((s, a, r, s2, legal2))

    def learn(self, rng: np.random.Generator):
        if len(self.replay) < self.cfg.batch_size:
            return
        idx = rng.choice(len(self.replay), size=self.cfg.batch_size, replace=False)
        batch = [self.replay[i] for i in idx]
        s = torch.tensor(np.stack([b[0] for b in batch]), dtype=torch.float32)
        a = torch.tensor([b[1] for b in batch], dtype=torch.int64)
        r = torch.tensor([b[2] for b in batch], dtype=torch.float32)
        s2 = torch.tensor(np.stack([b[3] for b in batch]), dtype=torch.float32)
        legal2 = torch.tensor(np.stack([b[4] for b in batch]), dtype=torch.bool)
        with torch.no_grad():
            q2 = self.q(s2)
            q2 = q2.masked_fill(~legal2, float("-inf"))
            target = r + self.cfg.gamma * q2.max(dim=1).values
        q = self.q(s).gather(1, a.unsqueeze(1)).squeeze(1)
        loss = nn.functional.mse_loss(q, target)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()


@dataclass
class AgentTriple:
    head: _Agent
    op: _Agent
    tail: _Agent

    @classmethod
    def create(cls, max_columns: int, cfg: CollectorConfig) -> "AgentTriple":
        return cls(
            head=_Agent(max_columns, cfg),
            op=_Agent(len(OPERATOR_NAMES), cfg),
            tail=_Agent(max_columns, cfg),
        )


def _column_legal(exprs: list[FeatureExpr], max_columns: int) -> np.ndarray:
    legal = np.zeros(max_columns, dtype=bool)
    legal[: len(exprs)] = True
    return legal


def step(
    agents: AgentTriple,
    exprs: list[FeatureExpr],
    table: np.ndarray,
    n_raw: int,
    epsilon: float,
    rng: np.random.Generator,
    l_max: int = 9,
    max_tries: int = 32,
) -> tuple[FeatureExpr, np.ndarray, tuple[int, int, int]]:
    """One generation step: pick (head, op, tail), build the new feature
    expression and append its evaluated column to the table.

    Candidate expressions longer than l_max are rejected and resampled; raw
    single-token columns always fit, so a legal action exists.
    """
    state = represent_state(table)
    legal = _column_legal(exprs, agents.head.n_actions)
    for _ in range(max_tries):
        h = agents.head.act(state, legal, epsilon, rng)
        o = agents.op.act(state, np.ones(len(OPERATOR_NAMES), dtype=bool), epsilon, rng)
        op_name = OPERATOR_NAMES[o]
        if OPERATORS[op_name].arity == 1:
            tokens = exprs[h].tokens + (op_name,)
            t = h  # tail unused for unary ops
        else:
            t = agents.tail.act(state, legal, epsilon, rng)
            tokens = exprs[h].tokens + exprs[t].tokens + (op_name,)
        if len(tokens) <= l_max:
            new_expr = FeatureExpr.from_tokens(tokens, n_raw)
            col = evaluate(FeatureSet((new_expr,)), table[:, :n_raw])
            return new_expr, np.hstack([table, col]), (h, o, t)
    # Fall back to a guaranteed-short combination of raw columns.
    h = int(rng.integers(n_raw))
    t = int(rng.integers(n_raw))
    o = int(np.argmax([OPERATORS[n].arity == 2 for n in OPERATOR_NAMES]))
    new_expr = FeatureExpr.from_tokens((f"f{h + 1}", f"f{t + 1}", OPERATOR_NAMES[o]), n_raw)
    col = evaluate(FeatureSet((new_expr,)), table[:, :n_raw])
    return new_expr, np.hstack([table, col]), (h, o, t)


def _normalize(records: list[TrainingRecord]) -> list[TrainingRecord]:
    ys = np.array([r.y_raw for r in records])
    lo, hi = ys.min(), ys.max()
    if hi > lo:
        norm = (ys - lo) / (hi - lo)
    else:
        norm = np.full_like(ys, 0.5)
    return [TrainingRecord(r.fs, r.y_raw, float(n)) for r, n in zip(records, norm)]


def collect(ds: Dataset, cfg: CollectorConfig, seed: int) -> CollectResult:
    """Run Q-learning episodes and harvest (feature set, score) records.

    Every step's full feature set is recorded (passthrough chunks for raw
    columns plus all generated features); records are deduplicated by their
    canonical serialization and y is min-max normalized over the corpus.
    """
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    start = time.monotonic()
    n_raw = ds.n_cols
    max_columns = n_raw + cfg.steps
    agents = AgentTriple.create(max_columns, cfg)

    raw_exprs = [FeatureExpr((f"f{i + 1}",)) for i in range(n_raw)]
    baseline_fs = FeatureSet(tuple(raw_exprs))
    baseline = downstream_score(ds, baseline_fs, seed).value

    seen: dict[str, TrainingRecord] = {
        serialize(baseline_fs): TrainingRecord(baseline_fs, baseline)
    }
    truncated = False
    half = max(1, cfg.episodes // 2)

    for ep in range(cfg.episodes):
        epsilon = cfg.eps_start + (cfg.eps_end - cfg.eps_start) * min(1.0, ep / half)
        exprs = list(raw_exprs)
        table = ds.X.copy()
        y_prev = baseline
        for _ in range(cfg.steps):
            if cfg.time_limit_s is not None and time.monotonic() - start > cfg.time_limit_s:
                truncated = True
                break
            state = represent_state(table)
            new_expr, new_table, (h, o, t) = step(
                agents, exprs, table, n_raw, epsilon, rng, cfg.l_max
            )
            exprs.append(new_expr)
            fs = FeatureSet(tuple(exprs))
            y_t = downstream_score(ds, fs, seed).value
            r = reward(y_t, y_prev)
            state2 = represent_state(new_table)
            legal2 = _column_legal(exprs, max_columns)
            agents.head.remember(state, h, r, state2, legal2)
            agents.op.remember(state, o, r, state2,
                               np.ones(len(OPERATOR_NAMES), dtype=bool))
            agents.tail.remember(state, t, r, state2, legal2)
            for ag in (agents.head, agents.op, agents.tail):
                ag.learn(rng)
            key = serialize(fs)
            if key not in seen:
                seen[key] = TrainingRecord(fs, y_t)
            table, y_prev = new_table, y_t
        if truncated:
            break

    records = _normalize(list(seen.values()))
    return CollectResult(records=records, baseline=baseline, truncated=truncated)
