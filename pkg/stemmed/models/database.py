import bisect
from functools import cached_property
from typing import Iterable, Iterator, Optional, Sequence, Tuple

import numpy as np

from stemmed.models.model import Event, NetworkSpec, NodeId
from stemmed.utils.errors import InvalidInputError

# pseudo-count credited to same-drug pairs before any data is seen
THETA_PSEUDO_COUNT = 1.0


class ConnectivityCounts:
    """
    Running counters behind the social connectivity theta.

    ``community[i]`` counts events at community i, ``co[i, s, s']`` counts events at
    community i whose involved drugs contain both s and s'. Counts are floats so that
    fractional (expected) event mass can be accumulated as well.
    """

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.community = np.zeros(spec.n_communities)
        self.co = np.zeros((spec.n_communities, spec.n_drugs, spec.n_drugs))
        self._node_community = spec.node_communities()
        self._node_drug = spec.node_drugs()

    def copy(self) -> "ConnectivityCounts":
        other = ConnectivityCounts.__new__(ConnectivityCounts)
        other.__dict__.update(self.__dict__)
        other.community = self.community.copy()
        other.co = self.co.copy()
        return other

    def add(self, community: int, co_involvement: np.ndarray, weight: float = 1.0) -> None:
        self.community[community] += weight
        self.co[community] += weight * co_involvement

    def add_event(self, event: Event) -> None:
        mask = involvement_mask(event, self.spec.n_drugs)
        self.add(event.node.community, np.outer(mask, mask))

    def theta(self, u: NodeId, v: NodeId) -> float:
        i, s, j, s2 = u.community, u.drug, v.community, v.drug
        num = self.co[i, s, s2]
        den = self.community[i]
        if i != j:
            num += self.co[j, s, s2]
            den += self.community[j]
        num += THETA_PSEUDO_COUNT * (s == s2)
        return float(num / (den + THETA_PSEUDO_COUNT))

    def theta_row(self, u: NodeId) -> np.ndarray:
        return self._theta(
            np.array([u.community]), np.array([u.drug])
        )[0]

    def theta_matrix(self) -> np.ndarray:
        return self._theta(self._node_community, self._node_drug)

    def _theta(self, ci: np.ndarray, si: np.ndarray) -> np.ndarray:
        cj, sj = self._node_community, self._node_drug
        same = ci[:, None] == cj[None, :]
        num = self.co[ci[:, None], si[:, None], sj[None, :]]
        num = num + np.where(same, 0.0, self.co[cj[None, :], si[:, None], sj[None, :]])
        num = num + THETA_PSEUDO_COUNT * (si[:, None] == sj[None, :])
        den = self.community[ci][:, None] + np.where(same, 0.0, self.community[cj][None, :])
        return num / (den + THETA_PSEUDO_COUNT)


def involvement_mask(event: Event, n_drugs: int) -> np.ndarray:
    mask = np.zeros(n_drugs)
    mask[list(event.drugs_involved)] = 1.0
    return mask


class EventSnapshot:
    """Immutable, time-sorted view of the events strictly before ``cutoff``."""

    def __init__(self, spec: NetworkSpec, n_features: int, events: Tuple[Event, ...], cutoff: float):
        self.spec = spec
        self.n_features = n_features
        self.events = events
        self.cutoff = cutoff

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    @cached_property
    def times(self) -> np.ndarray:
        return np.array([e.time for e in self.events], dtype=float)

    @cached_property
    def node_index(self) -> np.ndarray:
        n_drugs = self.spec.n_drugs
        return np.array(
            [e.node.community * n_drugs + e.node.drug for e in self.events], dtype=int
        )

    @cached_property
    def features(self) -> np.ndarray:
        return np.array([e.features for e in self.events], dtype=float).reshape(
            len(self.events), self.n_features
        )

    @cached_property
    def involvement(self) -> np.ndarray:
        out = np.zeros((len(self.events), self.spec.n_drugs))
        for row, event in enumerate(self.events):
            out[row, list(event.drugs_involved)] = 1.0
        return out

    @cached_property
    def communities(self) -> np.ndarray:
        return np.array([e.node.community for e in self.events], dtype=int)

    def connectivity(self) -> ConnectivityCounts:
        return self._connectivity

    @cached_property
    def _connectivity(self) -> ConnectivityCounts:
        counts = ConnectivityCounts(self.spec)
        if len(self.events):
            np.add.at(counts.community, self.communities, 1.0)
            np.add.at(
                counts.co,
                self.communities,
                self.involvement[:, :, None] * self.involvement[:, None, :],
            )
        return counts

    def connectivity_history(self) -> "ConnectivityHistory":
        return ConnectivityHistory(self)

    def snapshot(self, t: Optional[float] = None, inclusive: bool = False) -> "EventSnapshot":
        if t is None:
            return self
        k = int(np.searchsorted(self.times, t, side="right" if inclusive else "left"))
        if k == len(self.events) and (t <= self.cutoff):
            return self
        return EventSnapshot(self.spec, self.n_features, self.events[:k], min(t, self.cutoff))

    def node_events(self, node: NodeId) -> Tuple[Event, ...]:
        return tuple(e for e in self.events if e.node == node)

    def node_times(self, node: NodeId) -> np.ndarray:
        return self.times[self.node_index == self.spec.index(node)]

    def marks(self, nodes: Optional[Sequence[NodeId]] = None):
        """(features, drugs_involved) pairs of the events at ``nodes`` (all when None)."""
        if nodes is None:
            chosen = self.events
        else:
            wanted = set(nodes)
            chosen = [e for e in self.events if e.node in wanted]
        return [(e.features, e.drugs_involved) for e in chosen]


class ConnectivityHistory:
    """Cumulative connectivity counters indexed by event position, for batched theta lookups."""

    def __init__(self, snapshot: EventSnapshot):
        spec = snapshot.spec
        self.spec = spec
        self.times = snapshot.times
        n = len(snapshot)
        community = np.zeros((n + 1, spec.n_communities))
        co = np.zeros((n + 1, spec.n_communities, spec.n_drugs, spec.n_drugs))
        if n:
            rows = np.arange(1, n + 1)
            community[rows, snapshot.communities] = 1.0
            inv = snapshot.involvement
            co[rows, snapshot.communities] = inv[:, :, None] * inv[:, None, :]
        self.community = np.cumsum(community, axis=0)
        self.co = np.cumsum(co, axis=0)

    def theta_rows(self, u: NodeId, times: np.ndarray, inclusive: bool) -> np.ndarray:
        """
        theta_u^v for every source node v at each query time.

        With ``inclusive`` the events at the query time itself are counted, which is the
        value theta holds on the open interval right after that time.
        """
        side = "right" if inclusive else "left"
        k = np.searchsorted(self.times, np.asarray(times, dtype=float), side=side)
        cj = self.spec.node_communities()
        sj = self.spec.node_drugs()
        i, s = u.community, u.drug
        same = cj == i
        num = self.co[k][:, i, s, :][:, sj]
        num = num + np.where(same[None, :], 0.0, self.co[k][:, cj, s, sj])
        num = num + THETA_PSEUDO_COUNT * (sj == s)[None, :]
        den = self.community[k][:, [i]] + np.where(same[None, :], 0.0, self.community[k][:, cj])
        return num / (den + THETA_PSEUDO_COUNT)


class EventDatabase:
    """
    Append-only event store, kept sorted by time (ties keep insertion order).
    Single writer; readers work on immutable snapshots.
    """

    def __init__(self, spec: NetworkSpec, n_features: int = 0, events: Iterable[Event] = ()):
        self.spec = spec
        self.n_features = n_features
        self._events = []
        self._times = []
        self._full: Optional[EventSnapshot] = None
        self.extend(events)

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self) -> Iterator[Event]:
        return iter(tuple(self._events))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventDatabase):
            return NotImplemented
        return self.events == other.events

    @property
    def events(self) -> Tuple[Event, ...]:
        return tuple(self._events)

    @property
    def end_time(self) -> float:
        return self._times[-1] if self._times else 0.0

    def validate(self, event: Event) -> Event:
        self.spec.check(event.node)
        if len(event.features) != self.n_features:
            raise InvalidInputError(
                f"event has {len(event.features)} features, database expects {self.n_features}"
            )
        if any(not 0 <= d < self.spec.n_drugs for d in event.drugs_involved):
            raise InvalidInputError(f"involved drugs {sorted(event.drugs_involved)} out of range")
        return event

    def add(self, event: Event) -> None:
        self.validate(event)
        k = bisect.bisect_right(self._times, event.time)
        self._times.insert(k, event.time)
        self._events.insert(k, event)
        self._full = None

    def extend(self, events: Iterable[Event]) -> None:
        for event in events:
            self.add(event)

    def copy(self) -> "EventDatabase":
        return EventDatabase(self.spec, self.n_features, self._events)

    def filter(self, keep) -> "EventDatabase":
        return EventDatabase(self.spec, self.n_features, [e for e in self._events if keep(e)])

    def snapshot(self, t: Optional[float] = None, inclusive: bool = False) -> EventSnapshot:
        """
        Events with time < t (or <= t with ``inclusive``); all events when ``t`` is None.
        """
        if self._full is None:
            self._full = EventSnapshot(
                self.spec, self.n_features, tuple(self._events), float("inf")
            )
        if t is None:
            return self._full
        side = bisect.bisect_right if inclusive else bisect.bisect_left
        k = side(self._times, t)
        return EventSnapshot(self.spec, self.n_features, tuple(self._events[:k]), t)

    def node_events(self, node: NodeId) -> Tuple[Event, ...]:
        self.spec.check(node)
        return tuple(e for e in self._events if e.node == node)

    def count(self, node: NodeId, start: float, end: float) -> int:
        """Events at ``node`` with start <= time < end."""
        lo = bisect.bisect_left(self._times, start)
        hi = bisect.bisect_left(self._times, end)
        return sum(1 for e in self._events[lo:hi] if e.node == node)
