"""Message channels: an in-process loopback and an MQTT binding.

Everything on the wire is a JSON :class:`Envelope`. Topic layout::

    qvote/{election}/qkd/{session}/quantum
    qvote/{election}/qkd/{session}/bases/committee
    qvote/{election}/qkd/{session}/bases/voter
    qvote/{election}/qkd/{session}/confirm
    qvote/{election}/vote/{session}
    qvote/{election}/receipt/{session}
    qvote/{election}/audit/{session}
"""

from __future__ import annotations

import logging
import os
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, NamedTuple
from urllib.parse import urlparse

import numpy as np
import orjson

from .errors import ChannelError, InvalidArgument, PayloadTooLarge

log = logging.getLogger(__name__)

ENVELOPE_VERSION = 1
MAX_PAYLOAD_BYTES = 256 * 1024
BROKER_ENV = "QVOTE_BROKER_URI"


class MsgType(str, Enum):
    QKD_QUANTUM = "QKD_QUANTUM"
    QKD_BASES_COMMITTEE = "QKD_BASES_COMMITTEE"
    QKD_BASES_VOTER = "QKD_BASES_VOTER"
    KEY_CONFIRM = "KEY_CONFIRM"
    KEY_RETRY = "KEY_RETRY"
    VOTE_SUBMIT = "VOTE_SUBMIT"
    RECEIPT = "RECEIPT"
    AUDIT_REQUEST = "AUDIT_REQUEST"
    AUDIT_REVEAL = "AUDIT_REVEAL"


@dataclass(slots=True)
class Envelope:
    election_id: str
    session_id: str
    msg_type: MsgType
    payload: dict[str, Any]
    sent_at: int = 0
    version: int = ENVELOPE_VERSION

    @classmethod
    def make(cls, election_id: str, session_id: str, msg_type: MsgType, payload: dict) -> Envelope:
        return cls(election_id, session_id, MsgType(msg_type), payload, int(time.time() * 1000))

    def to_json(self) -> bytes:
        return orjson.dumps(
            {
                "version": self.version,
                "election_id": self.election_id,
                "session_id": self.session_id,
                "msg_type": self.msg_type.value,
                "sent_at": self.sent_at,
                "payload": self.payload,
            }
        )

    @classmethod
    def from_json(cls, data: bytes | str) -> Envelope:
        try:
            obj = orjson.loads(data)
            env = cls(
                election_id=str(obj["election_id"]),
                session_id=str(obj["session_id"]),
                msg_type=MsgType(obj["msg_type"]),
                payload=obj["payload"],
                sent_at=int(obj["sent_at"]),
                version=int(obj["version"]),
            )
        except (orjson.JSONDecodeError, ValueError, KeyError, TypeError) as exc:
            raise InvalidArgument(f"malformed envelope: {exc}") from exc
        if env.version != ENVELOPE_VERSION:
            raise InvalidArgument(f"unsupported envelope version {env.version}")
        if not isinstance(env.payload, dict):
            raise InvalidArgument("envelope payload must be a JSON object")
        return env


class Topics(NamedTuple):
    quantum: str
    bases_committee: str
    bases_voter: str
    confirm: str
    vote: str
    receipt: str
    audit: str


def topics(election_id: str, session_id: str) -> Topics:
    qkd = f"qvote/{election_id}/qkd/{session_id}"
    return Topics(
        quantum=f"{qkd}/quantum",
        bases_committee=f"{qkd}/bases/committee",
        bases_voter=f"{qkd}/bases/voter",
        confirm=f"{qkd}/confirm",
        vote=f"qvote/{election_id}/vote/{session_id}",
        receipt=f"qvote/{election_id}/receipt/{session_id}",
        audit=f"qvote/{election_id}/audit/{session_id}",
    )


def committee_filters(election_id: str) -> list[str]:
    """Everything the committee listens to for one election."""
    t = topics(election_id, "+")
    return [t.quantum, t.bases_voter, t.confirm, t.vote, t.audit]


def topic_matches(topic_filter: str, topic: str) -> bool:
    """MQTT filter matching with ``+`` (one level) and trailing ``#`` (rest)."""
    return _match_parts(topic_filter.split("/"), topic.split("/"))


def _match_parts(fparts: list[str], tparts: list[str]) -> bool:
    for i, f in enumerate(fparts):
        if f == "#":
            return True
        if i >= len(tparts):
            return False
        if f != "+" and f != tparts[i]:
            return False
    return len(fparts) == len(tparts)


Handler = Callable[[str, Envelope], None]


@dataclass(frozen=True)
class Subscription:
    topic_filter: str
    handler: Handler
    sub_id: int
    parts: tuple[str, ...] = ()

    def matches(self, tparts: list[str]) -> bool:
        return _match_parts(self.parts, tparts)


@dataclass(frozen=True)
class PublishAck:
    topic: str
    delivered: int | None  # handler count on loopback, None when the broker owns delivery
    dropped: bool = False


@dataclass(frozen=True)
class ChannelConfig:
    binding: str = "loopback"
    broker_uri: str | None = None
    qos: int = 1
    keepalive: int = 60
    drop_probability: float = 0.0
    delay: float | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.binding not in ("loopback", "mqtt"):
            raise InvalidArgument(f"unknown binding {self.binding!r}")
        if self.qos not in (0, 1, 2):
            raise InvalidArgument("MQTT QoS must be 0, 1 or 2")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise InvalidArgument("drop_probability must lie in [0, 1]")
        if self.binding == "mqtt" and not self.broker_uri:
            raise InvalidArgument("mqtt binding needs a broker URI")

    @classmethod
    def from_env(cls, broker_uri: str | None = None, **kw) -> ChannelConfig:
        uri = broker_uri or os.environ.get(BROKER_ENV)
        if uri and uri != "loopback":
            return cls(binding="mqtt", broker_uri=uri, **kw)
        return cls(**kw)


def _encode(envelope: Envelope) -> bytes:
    data = envelope.to_json()
    if len(data) > MAX_PAYLOAD_BYTES:
        raise PayloadTooLarge(f"{len(data)} byte envelope exceeds {MAX_PAYLOAD_BYTES}")
    return data


class Channel:
    """Shared subscription bookkeeping; bindings implement ``publish``."""

    def __init__(self) -> None:
        self._exact: dict[str, list[Subscription]] = {}
        self._wild: list[Subscription] = []
        self._wild_by_len: dict[int, list[Subscription]] = {}
        self._wild_deep: list[Subscription] = []
        self._subs_lock = threading.Lock()
        self._next_id = 0

    def _filter_in_use(self, topic_filter: str) -> bool:
        if topic_filter in self._exact:
            return True
        return any(s.topic_filter == topic_filter for s in self._wild)

    def subscribe(self, topic_filter: str, handler: Handler) -> Subscription:
        wild = "+" in topic_filter or "#" in topic_filter
        with self._subs_lock:
            pool = self._wild if wild else self._exact.get(topic_filter, [])
            for sub in pool:
                if sub.topic_filter == topic_filter and sub.handler == handler:
                    return sub
            new_filter = not self._filter_in_use(topic_filter)
            self._next_id += 1
            sub = Subscription(topic_filter, handler, self._next_id, tuple(topic_filter.split("/")))
            if wild:
                self._wild = self._wild + [sub]
                self._reindex_wild()
            else:
                self._exact[topic_filter] = pool + [sub]
        if new_filter:
            self._on_new_filter(topic_filter)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._subs_lock:
            if sub.topic_filter in self._exact:
                rest = [s for s in self._exact[sub.topic_filter] if s.sub_id != sub.sub_id]
                if rest:
                    self._exact[sub.topic_filter] = rest
                else:
                    del self._exact[sub.topic_filter]
            else:
                self._wild = [s for s in self._wild if s.sub_id != sub.sub_id]
                self._reindex_wild()
            still_used = self._filter_in_use(sub.topic_filter)
        if not still_used:
            self._on_filter_removed(sub.topic_filter)

    def _reindex_wild(self) -> None:
        by_len: dict[int, list[Subscription]] = {}
        for sub in self._wild:
            if "#" not in sub.parts:
                by_len.setdefault(len(sub.parts), []).append(sub)
        self._wild_by_len = by_len
        self._wild_deep = [sub for sub in self._wild if "#" in sub.parts]

    def _all_filters(self) -> set[str]:
        with self._subs_lock:
            return set(self._exact) | {s.topic_filter for s in self._wild}

    def _on_new_filter(self, topic_filter: str) -> None:
        pass

    def _on_filter_removed(self, topic_filter: str) -> None:
        pass

    def _dispatch(self, topic: str, data: bytes) -> int:
        targets = list(self._exact.get(topic, ()))
        if self._wild:
            tparts = topic.split("/")
            for pool in (self._wild_by_len.get(len(tparts), ()), self._wild_deep):
                targets += [s for s in pool if s.matches(tparts)]
        if not targets:
            return 0
        try:
            envelope = Envelope.from_json(data)
        except InvalidArgument:
            log.warning("dropping malformed message on %s", topic)
            return 0
        for sub in targets:
            try:
                sub.handler(topic, envelope)
            except Exception:
                log.exception("handler for %s failed on %s", sub.topic_filter, topic)
        return len(targets)

    def publish(self, topic: str, envelope: Envelope) -> PublishAck:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class LoopbackChannel(Channel):
    """In-process delivery in global publish order.

    Publishing from inside a handler only enqueues; the outermost publisher
    drains the queue, so handler chains never recurse or deadlock.
    """

    def __init__(
        self, drop_probability: float = 0.0, delay: float | None = None, seed: int | None = None
    ) -> None:
        super().__init__()
        self.drop_probability = drop_probability
        self.delay = delay
        self._rng = np.random.default_rng(seed)
        self._queue: deque[tuple[str, bytes]] = deque()
        self._lock = threading.Lock()
        self._draining = False
        self.filter: Callable[[str, bytes], bytes | None] | None = None

    def publish(self, topic: str, envelope: Envelope) -> PublishAck:
        data = _encode(envelope)
        if self.drop_probability and self._rng.random() < self.drop_probability:
            return PublishAck(topic, 0, dropped=True)
        if self.filter is not None:
            data = self.filter(topic, data)
            if data is None:
                return PublishAck(topic, 0, dropped=True)
        with self._lock:
            self._queue.append((topic, data))
            if self._draining:
                return PublishAck(topic, None)
            self._draining = True
        delivered = 0
        try:
            while True:
                with self._lock:
                    if not self._queue:
                        self._draining = False
                        break
                    item_topic, item = self._queue.popleft()
                if self.delay:
                    time.sleep(self.delay)
                n = self._dispatch(item_topic, item)
                if item_topic == topic and item is data:
                    delivered = n
        except BaseException:
            with self._lock:
                self._draining = False
            raise
        return PublishAck(topic, delivered)


class MqttChannel(Channel):
    """paho-mqtt binding. Handlers run on paho's network thread."""

    def __init__(self, broker_uri: str, qos: int = 1, keepalive: int = 60, connect_timeout: float = 5.0) -> None:
        super().__init__()
        import paho.mqtt.client as mqtt

        url = urlparse(broker_uri if "://" in broker_uri else f"mqtt://{broker_uri}")
        self.host = url.hostname or "localhost"
        self.port = url.port or 1883
        self.qos = qos
        self._connected = threading.Event()
        self._client = mqtt.Client(mqtt.CallbackAPIVersion.VERSION2)
        if url.username:
            self._client.username_pw_set(url.username, url.password)
        self._client.on_connect = self._on_connect
        self._client.on_message = self._on_message
        try:
            self._client.connect(self.host, self.port, keepalive)
        except OSError as exc:
            raise ChannelError(f"broker {self.host}:{self.port} unreachable: {exc}", retry_after=5.0) from exc
        self._client.loop_start()
        if not self._connected.wait(connect_timeout):
            self._client.loop_stop()
            raise ChannelError(f"no CONNACK from {self.host}:{self.port}", retry_after=5.0)

    def _on_connect(self, client, userdata, flags, reason_code, properties=None) -> None:
        if not reason_code.is_failure:
            for f in self._all_filters():
                client.subscribe(f, self.qos)
            self._connected.set()

    def _on_message(self, client, userdata, msg) -> None:
        self._dispatch(msg.topic, msg.payload)

    def _on_new_filter(self, topic_filter: str) -> None:
        result, mid = self._client.subscribe(topic_filter, self.qos)
        if result != 0:
            raise ChannelError(f"subscribe to {topic_filter} failed ({result})", retry_after=1.0)

    def _on_filter_removed(self, topic_filter: str) -> None:
        self._client.unsubscribe(topic_filter)

    def publish(self, topic: str, envelope: Envelope) -> PublishAck:
        info = self._client.publish(topic, _encode(envelope), qos=self.qos)
        if info.rc != 0:
            raise ChannelError(f"publish to {topic} failed ({info.rc})", retry_after=1.0)
        return PublishAck(topic, None)

    def close(self) -> None:
        self._client.disconnect()
        self._client.loop_stop()


def open_channel(config: ChannelConfig) -> Channel:
    if config.binding == "mqtt":
        return MqttChannel(config.broker_uri, config.qos, config.keepalive)
    return LoopbackChannel(config.drop_probability, config.delay, config.seed)


class Inbox:
    """Collects envelopes from a set of topics so a caller can block on replies."""

    def __init__(self, channel: Channel, topic_filters: list[str]) -> None:
        self.channel = channel
        self.topic_filters = topic_filters
        self._queue: queue.SimpleQueue[Envelope] = queue.SimpleQueue()
        self._subs: list[Subscription] = []

    def _put(self, topic: str, envelope: Envelope) -> None:
        self._queue.put(envelope)

    def __enter__(self) -> Inbox:
        self._subs = [self.channel.subscribe(f, self._put) for f in self.topic_filters]
        return self

    def __exit__(self, *exc) -> None:
        for sub in self._subs:
            self.channel.unsubscribe(sub)
        self._subs = []

    def expect(self, predicate: Callable[[Envelope], bool], timeout: float, what: str = "reply") -> Envelope:
        """Return the first envelope satisfying ``predicate``; others are discarded."""
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            try:
                env = self._queue.get(timeout=max(remaining, 0.0)) if remaining > 0 else self._queue.get_nowait()
            except queue.Empty:
                raise ChannelError(f"timed out after {timeout}s waiting for {what}") from None
            if predicate(env):
                return env
