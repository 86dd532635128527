"""Experience storage: on-policy batches, uniform ring replay and prioritized replay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MemorySpec:
    name: str = "onpolicy"
    max_size: int = 10000
    batch_size: int = 32
    use_cer: bool = False
    per_alpha: float = 0.6
    per_beta_start: float = 0.4
    per_beta_end: float = 1.0
    per_epsilon: float = 0.01

    def violations(self) -> list[str]:
        out = []
        if self.name not in ("onpolicy", "replay", "prioritized_replay"):
            out.append(f"memory.name {self.name!r} unknown")
        if not self.max_size >= self.batch_size >= 1:
            out.append("memory requires max_size >= batch_size >= 1")
        if self.per_alpha < 0:
            out.append("memory.per_alpha must be >= 0")
        for key in ("per_beta_start", "per_beta_end"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                out.append(f"memory.{key} out of [0,1]")
        if not self.per_epsilon > 0:
            out.append("memory.per_epsilon must be > 0")
        return out


@dataclass
class Transition:
    state: np.ndarray
    action: object
    reward: float
    next_state: np.ndarray
    done: bool
    extras: dict = field(default_factory=dict)


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    extras: dict = field(default_factory=dict)
    # lengths of each lane's contiguous segment (on-policy batches only)
    lane_lengths: list | None = None

    def __len__(self):
        return len(self.rewards)

    def lane_slices(self):
        start = 0
        for n in self.lane_lengths or [len(self)]:
            yield slice(start, start + n)
            start += n


class EmptyMemoryError(RuntimeError):
    pass


class InsufficientDataError(RuntimeError):
    pass


def _stack(transitions: list[Transition], lane_lengths=None) -> Batch:
    extras = {}
    if transitions and transitions[0].extras:
        for key in transitions[0].extras:
            extras[key] = np.array([t.extras[key] for t in transitions])
    return Batch(
        states=np.array([t.state for t in transitions], dtype=np.float64),
        actions=np.array([t.action for t in transitions]),
        rewards=np.array([t.reward for t in transitions], dtype=np.float64),
        next_states=np.array([t.next_state for t in transitions], dtype=np.float64),
        dones=np.array([t.done for t in transitions], dtype=np.float64),
        extras=extras,
        lane_lengths=lane_lengths,
    )


class OnPolicyMemory:
    """Fresh-data memory, stored lane-major so each lane's trajectory stays contiguous."""

    def __init__(self, num_lanes: int = 1):
        self.num_lanes = num_lanes
        self.lanes: list[list[Transition]] = [[] for _ in range(num_lanes)]

    @property
    def size(self) -> int:
        return sum(len(lane) for lane in self.lanes)

    def add(self, transition: Transition, lane: int = 0) -> None:
        t = transition
        self.lanes[lane].append(Transition(
            np.array(t.state, dtype=np.float64), t.action, float(t.reward),
            np.array(t.next_state, dtype=np.float64), bool(t.done), dict(t.extras)))

    def drain(self) -> Batch:
        if self.size == 0:
            raise EmptyMemoryError("drain called on an empty on-policy memory")
        flat = [t for lane in self.lanes for t in lane]
        lengths = [len(lane) for lane in self.lanes]
        self.lanes = [[] for _ in range(self.num_lanes)]
        return _stack(flat, lengths)

    def complete_size(self) -> int:
        """Number of stored frames that belong to finished episodes."""
        total = 0
        for lane in self.lanes:
            for i in range(len(lane) - 1, -1, -1):
                if lane[i].done:
                    total += i + 1
                    break
        return total

    def drain_episodes(self) -> Batch:
        """Drain only finished episodes; unfinished lane tails stay stored."""
        taken, lengths, kept = [], [], []
        for lane in self.lanes:
            cut = 0
            for i in range(len(lane) - 1, -1, -1):
                if lane[i].done:
                    cut = i + 1
                    break
            taken.extend(lane[:cut])
            lengths.append(cut)
            kept.append(lane[cut:])
        if not taken:
            raise EmptyMemoryError("no finished episodes to drain")
        self.lanes = kept
        return _stack(taken, lengths)


class ReplayMemory:
    """Ring buffer sampled uniformly with replacement."""

    def __init__(self, spec: MemorySpec):
        self.spec = spec
        self.max_size = int(spec.max_size)
        self.batch_size = int(spec.batch_size)
        self.size = 0
        self.head = -1  # slot of the most recent transition
        self.total_added = 0
        self._arrays = None

    def _allocate(self, t: Transition):
        n = self.max_size
        action = np.asarray(t.action)
        self._arrays = {
            "states": np.zeros((n,) + np.shape(t.state)),
            "actions": np.zeros((n,) + action.shape, dtype=action.dtype),
            "rewards": np.zeros(n),
            "next_states": np.zeros((n,) + np.shape(t.next_state)),
            "dones": np.zeros(n),
        }

    def add(self, transition: Transition) -> int:
        if self._arrays is None:
            self._allocate(transition)
        slot = (self.head + 1) % self.max_size
        a = self._arrays
        # assignment copies, so stored rows never alias caller arrays
        a["states"][slot] = transition.state
        a["actions"][slot] = transition.action
        a["rewards"][slot] = transition.reward
        a["next_states"][slot] = transition.next_state
        a["dones"][slot] = float(transition.done)
        self.head = slot
        self.size = min(self.size + 1, self.max_size)
        self.total_added += 1
        return slot

    def _gather(self, slots: np.ndarray) -> Batch:
        a = self._arrays
        return Batch(a["states"][slots], a["actions"][slots], a["rewards"][slots],
                     a["next_states"][slots], a["dones"][slots])

    def contents(self) -> Batch:
        """All stored transitions, oldest first."""
        if self.size < self.max_size:
            slots = np.arange(self.size)
        else:
            slots = (np.arange(self.max_size) + self.head + 1) % self.max_size
        return self._gather(slots)

    def sample_slots(self, rng: np.random.Generator) -> np.ndarray:
        if self.size < self.batch_size:
            raise InsufficientDataError(
                f"replay holds {self.size} transitions, batch_size is {self.batch_size}")
        slots = rng.integers(0, self.size, size=self.batch_size)
        if self.spec.use_cer:
            slots[-1] = self.head
        return slots

    def sample(self, rng: np.random.Generator) -> Batch:
        return self._gather(self.sample_slots(rng))

    def metrics(self) -> dict:
        return {"memory_size": self.size}


class SumTree:
    """Binary tree of partial sums over a power-of-two number of leaves.

    Node 1 is the root, node i has children 2i and 2i+1, leaves occupy
    [capacity, 2 * capacity).
    """

    def __init__(self, min_capacity: int):
        cap = 1
        while cap < min_capacity:
            cap *= 2
        self.capacity = cap
        self.tree = np.zeros(2 * cap)

    def total(self) -> float:
        return float(self.tree[1])

    def leaf(self, idx) -> np.ndarray:
        return self.tree[np.asarray(idx) + self.capacity]

    def leaves(self) -> np.ndarray:
        return self.tree[self.capacity:]

    def set_one(self, idx: int, priority: float) -> None:
        tree = self.tree
        pos = idx + self.capacity
        tree[pos] = priority
        pos //= 2
        while pos >= 1:
            tree[pos] = tree[2 * pos] + tree[2 * pos + 1]
            pos //= 2

    def set(self, idxs, priorities) -> None:
        pos = np.asarray(idxs, dtype=np.int64) + self.capacity
        self.tree[pos] = priorities
        if self.capacity == 1:
            return
        pos = np.unique(pos // 2)
        while True:
            self.tree[pos] = self.tree[2 * pos] + self.tree[2 * pos + 1]
            if pos[0] == 1:
                break
            pos = np.unique(pos // 2)

    def find(self, u) -> np.ndarray:
        """Leaf indices whose cumulative interval contains each query in [0, total)."""
        u = np.array(u, dtype=np.float64, ndmin=1)
        tree = self.tree
        node = np.ones(len(u), dtype=np.int64)
        while node[0] < self.capacity:
            left = 2 * node
            left_sum = tree[left]
            go_right = (u >= left_sum) & (tree[left + 1] > 0)
            u = np.where(go_right, u - left_sum, u)
            node = np.where(go_right, left + 1, left)
        return node - self.capacity

    def audit(self) -> float:
        """Largest |node - (left + right)| over internal nodes."""
        internal = np.arange(1, self.capacity)
        if len(internal) == 0:
            return 0.0
        return float(np.max(np.abs(self.tree[internal] - self.tree[2 * internal] - self.tree[2 * internal + 1])))


class PrioritizedReplay(ReplayMemory):
    """Proportional prioritized replay with stratified sampling.

    Sampled indices are absolute insertion counters, so an index whose slot
    has since been overwritten is recognised as stale.
    """

    def __init__(self, spec: MemorySpec):
        super().__init__(spec)
        self.tree = SumTree(self.max_size)
        self.max_priority = 1.0
        self.stale_updates = 0
        self._slot_ids = np.full(self.max_size, -1, dtype=np.int64)

    def add(self, transition: Transition) -> int:
        slot = super().add(transition)
        self._slot_ids[slot] = self.total_added - 1
        self.tree.set_one(slot, self.max_priority)
        return slot

    def priority(self, slot: int) -> float:
        return float(self.tree.leaf(slot))

    def sample(self, rng: np.random.Generator, beta: float = 0.4):
        if self.size < self.batch_size:
            raise InsufficientDataError(
                f"replay holds {self.size} transitions, batch_size is {self.batch_size}")
        n = self.batch_size
        total = self.tree.total()
        segment = total / n
        u = (np.arange(n) + rng.random(n)) * segment
        u = np.minimum(u, np.nextafter(total, 0.0))
        slots = self.tree.find(u)
        if self.spec.use_cer:
            slots[-1] = self.head
        probs = self.tree.leaf(slots) / total
        weights = (self.size * probs) ** (-beta)
        weights = weights / np.max(weights)
        batch = self._gather(slots)
        return batch, self._slot_ids[slots].copy(), weights

    def priorities_from_errors(self, td_errors) -> np.ndarray:
        return (np.abs(np.asarray(td_errors, dtype=np.float64)) + self.spec.per_epsilon) ** self.spec.per_alpha

    def update_priorities(self, indices, td_errors) -> None:
        indices = np.asarray(indices, dtype=np.int64)
        priorities = self.priorities_from_errors(td_errors)
        slots = indices % self.max_size
        live = self._slot_ids[slots] == indices
        self.stale_updates += int(np.sum(~live))
        if np.any(live):
            self.tree.set(slots[live], priorities[live])
            self.max_priority = max(self.max_priority, float(np.max(priorities[live])))

    def metrics(self) -> dict:
        return {"memory_size": self.size, "stale_updates": self.stale_updates}


def make_memory(spec: MemorySpec, num_lanes: int = 1):
    if spec.name == "onpolicy":
        return OnPolicyMemory(num_lanes)
    if spec.name == "replay":
        return ReplayMemory(spec)
    if spec.name == "prioritized_replay":
        return PrioritizedReplay(spec)
    raise ValueError(f"unknown memory {spec.name!r}")
