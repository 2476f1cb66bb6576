"""In-memory publish/subscribe bus with role-based authorization.

One logical event stream; consumers attach filtered subscriptions with
bounded queues (drop-oldest overflow, observable drop counter). Publishing
assigns a gap-free sequence number and atomically maintains the
current-status view, the latest event per (component, class).
"""

from __future__ import annotations

import logging
import secrets
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from fnmatch import fnmatchcase

from .errors import (
    AuthError,
    SubscriptionClosed,
    Timeout,
    UnknownSubscription,
    ValidationError,
)
from .events import ComponentKind, NormalizedEvent, Severity

log = logging.getLogger(__name__)


class Role(str, Enum):
    MEDIATOR = "mediator"
    CONSUMER = "consumer"
    ADMIN = "admin"


@dataclass(frozen=True)
class AuthToken:
    """Bearer token with a role set; the token string is the credential."""

    token: str
    roles: frozenset[Role]
    label: str = ""

    def __post_init__(self) -> None:
        if not self.roles:
            raise ValidationError("token must carry at least one role")
        object.__setattr__(self, "roles", frozenset(Role(r) for r in self.roles))

    def __repr__(self) -> str:  # never leak the token string into logs
        roles = ",".join(sorted(r.value for r in self.roles))
        return f"AuthToken(label={self.label!r}, roles={{{roles}}}, token=***)"


def class_glob_match(pattern: str, event_class: str) -> bool:
    """Segment-wise glob over dotted class paths.

    ``*`` wildcards a single segment: ``perf.*`` matches ``perf.cpu`` but
    neither ``perf`` nor ``perf.cpu.user``.
    """
    pat_segs = pattern.split(".")
    cls_segs = event_class.split(".")
    if len(pat_segs) != len(cls_segs):
        return False
    return all(fnmatchcase(c, p) for p, c in zip(pat_segs, cls_segs))


@dataclass(frozen=True)
class EventFilter:
    """Event predicate; an absent field matches everything."""

    component_kinds: frozenset[ComponentKind] | None = None
    class_glob: str | None = None
    min_severity: Severity | None = None

    def __post_init__(self) -> None:
        if self.component_kinds is not None:
            object.__setattr__(
                self, "component_kinds", frozenset(ComponentKind(k) for k in self.component_kinds)
            )
        if self.min_severity is not None:
            object.__setattr__(self, "min_severity", Severity.parse(self.min_severity))

    def matches(self, ev: NormalizedEvent) -> bool:
        if self.component_kinds is not None and ev.component.kind not in self.component_kinds:
            return False
        if self.class_glob is not None and not class_glob_match(self.class_glob, ev.event_class):
            return False
        if self.min_severity is not None and ev.severity < self.min_severity:
            return False
        return True


MATCH_ALL = EventFilter()


class Subscription:
    """Bounded FIFO delivery queue for one consumer.

    Overflow drops the oldest queued event and increments ``dropped_count``.
    Reads are expected from one consumer at a time; the handle may move
    between threads.
    """

    def __init__(self, sub_id: str, filter: EventFilter, capacity: int):
        if capacity < 1:
            raise ValidationError("subscription capacity must be >= 1")
        self.sub_id = sub_id
        self.filter = filter
        self.capacity = capacity
        self._items: deque[tuple[int, NormalizedEvent]] = deque()
        self._cond = threading.Condition()
        self._dropped = 0
        self._delivered = 0
        self._closed = False

    @property
    def dropped_count(self) -> int:
        with self._cond:
            return self._dropped

    @property
    def delivered_count(self) -> int:
        with self._cond:
            return self._delivered

    @property
    def closed(self) -> bool:
        with self._cond:
            return self._closed

    def qsize(self) -> int:
        with self._cond:
            return len(self._items)

    def _offer(self, seq_no: int, ev: NormalizedEvent) -> None:
        with self._cond:
            if self._closed:
                return
            if len(self._items) >= self.capacity:
                self._items.popleft()
                self._dropped += 1
            self._items.append((seq_no, ev))
            self._cond.notify()

    def _close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def next(self, timeout_ms: int = 0) -> NormalizedEvent:
        """Pop the oldest queued event; raise Timeout when none arrives in time.

        Raises SubscriptionClosed immediately once the subscription is revoked.
        """
        seq, ev = self.next_with_seq(timeout_ms)
        return ev

    def next_with_seq(self, timeout_ms: int = 0) -> tuple[int, NormalizedEvent]:
        deadline = time.monotonic() + max(timeout_ms, 0) / 1000.0
        with self._cond:
            while True:
                if self._closed:
                    raise SubscriptionClosed(self.sub_id)
                if self._items:
                    seq, ev = self._items.popleft()
                    self._delivered += 1
                    return seq, ev
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise Timeout(f"no event within {timeout_ms} ms")
                self._cond.wait(remaining)


@dataclass(frozen=True)
class StatusSnapshot:
    """Latest event per (component id, class) as of a publish sequence point."""

    as_of_seq: int
    entries: dict[tuple[str, str], NormalizedEvent] = field(default_factory=dict)


class EventBus:
    """The management server's event hub.

    publish is linearizable with respect to sequence assignment and status
    update; any number of publishers and subscription readers may run
    concurrently.
    """

    def __init__(self, root_label: str = "root"):
        self._lock = threading.Lock()
        self._seq = 0
        self._subs: dict[str, Subscription] = {}
        self._status: dict[tuple[str, str], NormalizedEvent] = {}
        self._tokens: dict[str, AuthToken] = {}
        root = AuthToken(
            token=secrets.token_hex(16),
            roles=frozenset({Role.ADMIN, Role.MEDIATOR, Role.CONSUMER}),
            label=root_label,
        )
        self._tokens[root.token] = root
        self._root = root

    @property
    def root_token(self) -> AuthToken:
        """Bootstrap token carrying every role."""
        return self._root

    @property
    def current_seq(self) -> int:
        with self._lock:
            return self._seq

    def subscription_count(self) -> int:
        with self._lock:
            return len(self._subs)

    # -- authorization --------------------------------------------------------

    def resolve_token(self, token_str: str) -> AuthToken | None:
        with self._lock:
            return self._tokens.get(token_str)

    def _require(self, token: AuthToken, *roles: Role) -> AuthToken:
        if not isinstance(token, AuthToken):
            raise AuthError("not a token")
        with self._lock:
            known = self._tokens.get(token.token)
        if known is None:
            raise AuthError("unknown token")
        if not any(r in known.roles for r in roles):
            wanted = " or ".join(r.value for r in roles)
            raise AuthError(f"token {known.label!r} lacks role {wanted}")
        return known

    def mint_token(self, admin: AuthToken, roles: frozenset[Role] | set[str], label: str = "") -> AuthToken:
        """Create and register a fresh token; requires the admin role."""
        self._require(admin, Role.ADMIN)
        token = AuthToken(token=secrets.token_hex(16), roles=frozenset(Role(r) for r in roles), label=label)
        with self._lock:
            self._tokens[token.token] = token
        log.info("minted token label=%r roles=%s", label, sorted(r.value for r in token.roles))
        return token

    def install_token(self, admin: AuthToken, token_str: str, roles: frozenset[Role] | set[str], label: str = "") -> AuthToken:
        """Register a caller-supplied token string (token-file support)."""
        self._require(admin, Role.ADMIN)
        token = AuthToken(token=token_str, roles=frozenset(Role(r) for r in roles), label=label)
        with self._lock:
            if token_str in self._tokens:
                raise ValidationError(f"token for {self._tokens[token_str].label!r} already registered")
            self._tokens[token.token] = token
        return token

    # -- core operations -------------------------------------------------------

    def publish(self, token: AuthToken, ev: NormalizedEvent) -> int:
        """Publish one event; returns its sequence number (1-based, gap-free)."""
        self._require(token, Role.MEDIATOR)
        if not isinstance(ev, NormalizedEvent):
            raise ValidationError("publish expects a NormalizedEvent")
        with self._lock:
            self._seq += 1
            seq = self._seq
            self._status[(ev.component.id, ev.event_class)] = ev
            subs = list(self._subs.values())
            for sub in subs:
                if sub.filter.matches(ev):
                    sub._offer(seq, ev)
        return seq

    def subscribe(self, token: AuthToken, filter: EventFilter = MATCH_ALL, capacity: int = 1024) -> Subscription:
        """Attach a bounded subscription receiving events published from now on."""
        self._require(token, Role.CONSUMER)
        sub = Subscription(sub_id=secrets.token_hex(8), filter=filter, capacity=capacity)
        with self._lock:
            self._subs[sub.sub_id] = sub
        return sub

    def snapshot(self, token: AuthToken, selector: EventFilter = MATCH_ALL) -> StatusSnapshot:
        """Current status: the highest-seq event per (component, class)."""
        self._require(token, Role.CONSUMER, Role.ADMIN)
        with self._lock:
            entries = {key: ev for key, ev in self._status.items() if selector.matches(ev)}
            return StatusSnapshot(as_of_seq=self._seq, entries=entries)

    def revoke(self, admin: AuthToken, sub_id: str) -> None:
        """Close a subscription by id; requires the admin role."""
        self._require(admin, Role.ADMIN)
        with self._lock:
            sub = self._subs.pop(sub_id, None)
        if sub is None:
            raise UnknownSubscription(sub_id)
        sub._close()

    def close_subscription(self, sub: Subscription) -> None:
        """Owner-side teardown of a subscription handle; no role required."""
        with self._lock:
            self._subs.pop(sub.sub_id, None)
        sub._close()
