from __future__ import annotations

import threading
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from qvote.errors import ChannelError, InvalidArgument, PayloadTooLarge
from qvote.transport import (
    BROKER_ENV,
    MAX_PAYLOAD_BYTES,
    ChannelConfig,
    Envelope,
    Inbox,
    LoopbackChannel,
    MqttChannel,
    MsgType,
    committee_filters,
    open_channel,
    topic_matches,
    topics,
)

json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-(2**53), 2**53) | st.text(max_size=20),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=8), inner, max_size=4),
    max_leaves=12,
)
envelopes = st.builds(
    Envelope,
    election_id=st.text(min_size=1, max_size=12),
    session_id=st.uuids().map(str),
    msg_type=st.sampled_from(list(MsgType)),
    payload=st.dictionaries(st.text(max_size=8), json_values, max_size=5),
    sent_at=st.integers(0, 2**42),
)


def env(msg_type=MsgType.VOTE_SUBMIT, **payload) -> Envelope:
    return Envelope.make("e1", "s1", msg_type, payload)


class Recorder:
    def __init__(self) -> None:
        self.seen: list[tuple[str, Envelope]] = []
        self.event = threading.Event()

    def __call__(self, topic: str, envelope: Envelope) -> None:
        self.seen.append((topic, envelope))
        self.event.set()


class TestEnvelope:
    @given(envelopes)
    def test_roundtrip(self, e):
        assert Envelope.from_json(e.to_json()) == e

    def test_schema(self):
        import json

        obj = json.loads(env(x=1).to_json())
        assert set(obj) == {"version", "election_id", "session_id", "msg_type", "sent_at", "payload"}
        assert obj["version"] == 1 and isinstance(obj["sent_at"], int)

    @pytest.mark.parametrize(
        "data",
        [b"not json", b"[]", b'{"version": 1}',
         b'{"version":2,"election_id":"e","session_id":"s","msg_type":"RECEIPT","sent_at":0,"payload":{}}',
         b'{"version":1,"election_id":"e","session_id":"s","msg_type":"NOPE","sent_at":0,"payload":{}}',
         b'{"version":1,"election_id":"e","session_id":"s","msg_type":"RECEIPT","sent_at":0,"payload":[]}'],
    )
    def test_rejects_malformed(self, data):
        with pytest.raises(InvalidArgument):
            Envelope.from_json(data)


class TestTopics:
    def test_scheme(self):
        t = topics("e1", "s9")
        assert t.quantum == "qvote/e1/qkd/s9/quantum"
        assert t.bases_committee == "qvote/e1/qkd/s9/bases/committee"
        assert t.bases_voter == "qvote/e1/qkd/s9/bases/voter"
        assert t.confirm == "qvote/e1/qkd/s9/confirm"
        assert (t.vote, t.receipt, t.audit) == ("qvote/e1/vote/s9", "qvote/e1/receipt/s9", "qvote/e1/audit/s9")

    @pytest.mark.parametrize(
        "pattern, topic, expected",
        [
            ("qvote/e1/vote/+", "qvote/e1/vote/s42", True),
            ("qvote/e1/vote/+", "qvote/e2/vote/s42", False),
            ("qvote/e1/vote/+", "qvote/e1/vote/s42/x", False),
            ("qvote/+/qkd/+/quantum", "qvote/e1/qkd/s/quantum", True),
            ("qvote/e1/#", "qvote/e1/qkd/s/bases/voter", True),
            ("qvote/e1/#", "qvote/e1", True),
            ("qvote/e1/vote/s1", "qvote/e1/vote/s1", True),
        ],
    )
    def test_wildcards(self, pattern, topic, expected):
        assert topic_matches(pattern, topic) is expected

    def test_committee_filters_cover_voter_topics(self):
        t = topics("e1", "abc")
        filters = committee_filters("e1")
        for topic in (t.quantum, t.bases_voter, t.confirm, t.vote, t.audit):
            assert any(topic_matches(f, topic) for f in filters)
        for topic in (t.bases_committee, t.receipt):
            assert not any(topic_matches(f, topic) for f in filters)


class TestLoopback:
    def test_single_delivery_byte_identical(self, loopback):
        rec = Recorder()
        loopback.subscribe("a/b", rec)
        e = env(x=[1, 2])
        ack = loopback.publish("a/b", e)
        assert ack.delivered == 1
        assert len(rec.seen) == 1 and rec.seen[0][1].to_json() == e.to_json()

    def test_drop_everything(self):
        ch = LoopbackChannel(drop_probability=1.0)
        rec = Recorder()
        ch.subscribe("a", rec)
        assert ch.publish("a", env()).dropped
        assert rec.seen == []

    def test_publish_order(self, loopback):
        rec = Recorder()
        loopback.subscribe("t", rec)
        for i in range(20):
            loopback.publish("t", env(i=i))
        assert [e.payload["i"] for _, e in rec.seen] == list(range(20))

    def test_wildcard_and_isolation(self, loopback):
        rec = Recorder()
        loopback.subscribe("qvote/e1/vote/+", rec)
        loopback.publish("qvote/e1/vote/s1", env())
        loopback.publish("qvote/e2/vote/s1", env())
        loopback.publish("qvote/e1/receipt/s1", env())
        assert [t for t, _ in rec.seen] == ["qvote/e1/vote/s1"]

    def test_session_isolation(self, loopback):
        a, b = Recorder(), Recorder()
        loopback.subscribe(topics("e1", "A").receipt, a)
        loopback.subscribe(topics("e1", "B").receipt, b)
        loopback.publish(topics("e1", "A").receipt, env(MsgType.RECEIPT))
        assert len(a.seen) == 1 and b.seen == []

    def test_unsubscribe(self, loopback):
        rec = Recorder()
        sub = loopback.subscribe("t", rec)
        loopback.unsubscribe(sub)
        loopback.publish("t", env())
        assert rec.seen == []

    def test_duplicate_subscription_is_idempotent(self, loopback):
        rec = Recorder()
        assert loopback.subscribe("t/+", rec) == loopback.subscribe("t/+", rec)
        loopback.publish("t/x", env())
        assert len(rec.seen) == 1

    def test_publish_from_handler_does_not_recurse(self, loopback):
        order = []

        def first(topic, e):
            order.append(("first", e.payload["n"]))
            if e.payload["n"] < 3:
                loopback.publish("t", env(n=e.payload["n"] + 1))
            order.append(("done", e.payload["n"]))

        loopback.subscribe("t", first)
        loopback.publish("t", env(n=0))
        # Each nested publish is delivered only after the current handler returns.
        assert order == [("first", 0), ("done", 0), ("first", 1), ("done", 1),
                         ("first", 2), ("done", 2), ("first", 3), ("done", 3)]

    def test_filter_hook_can_rewrite_and_drop(self, loopback):
        rec = Recorder()
        loopback.subscribe("t", rec)
        loopback.filter = lambda topic, data: None
        assert loopback.publish("t", env()).dropped
        loopback.filter = lambda topic, data: data.replace(b'"x":1', b'"x":2')
        loopback.publish("t", env(x=1))
        assert rec.seen[-1][1].payload == {"x": 2}

    def test_malformed_bytes_are_dropped(self, loopback):
        rec = Recorder()
        loopback.subscribe("t", rec)
        loopback.filter = lambda topic, data: b"garbage"
        loopback.publish("t", env())
        assert rec.seen == []

    def test_failing_handler_does_not_block_others(self, loopback):
        rec = Recorder()

        def boom(topic, e):
            raise RuntimeError("handler bug")

        loopback.subscribe("t", boom)
        loopback.subscribe("t", rec)
        loopback.publish("t", env())
        assert len(rec.seen) == 1

    def test_oversized_payload(self, loopback):
        with pytest.raises(PayloadTooLarge):
            loopback.publish("t", env(blob="x" * (MAX_PAYLOAD_BYTES + 1)))

    def test_threaded_publishers(self, loopback):
        rec = Recorder()
        loopback.subscribe("t/+", rec)

        def work(k):
            for i in range(50):
                loopback.publish(f"t/{k}", env(i=i))

        threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(rec.seen) == 200
        for k in range(4):
            assert [e.payload["i"] for t, e in rec.seen if t == f"t/{k}"] == list(range(50))


class TestInbox:
    def test_expect_filters_and_times_out(self, loopback):
        with Inbox(loopback, ["r"]) as inbox:
            loopback.publish("r", env(MsgType.RECEIPT, n=1))
            loopback.publish("r", env(MsgType.RECEIPT, n=2))
            assert inbox.expect(lambda e: e.payload["n"] == 2, 0.1).payload["n"] == 2
            with pytest.raises(ChannelError):
                inbox.expect(lambda e: True, 0.05, "nothing")


class TestConfig:
    def test_validation(self):
        with pytest.raises(InvalidArgument):
            ChannelConfig(qos=3)
        with pytest.raises(InvalidArgument):
            ChannelConfig(drop_probability=1.5)
        with pytest.raises(InvalidArgument):
            ChannelConfig(binding="mqtt")
        with pytest.raises(InvalidArgument):
            ChannelConfig(binding="carrier-pigeon")

    def test_from_env(self, monkeypatch):
        monkeypatch.delenv(BROKER_ENV, raising=False)
        assert ChannelConfig.from_env().binding == "loopback"
        monkeypatch.setenv(BROKER_ENV, "mqtt://broker:1884")
        cfg = ChannelConfig.from_env()
        assert (cfg.binding, cfg.broker_uri, cfg.qos) == ("mqtt", "mqtt://broker:1884", 1)

    def test_open_loopback(self):
        assert isinstance(open_channel(ChannelConfig()), LoopbackChannel)

    def test_unreachable_broker(self):
        with pytest.raises(ChannelError) as err:
            MqttChannel("mqtt://127.0.0.1:1", connect_timeout=1.0)
        assert err.value.retry_after is not None


class TestMqtt:
    def test_publish_subscribe_roundtrip(self, broker_uri):
        with MqttChannel(broker_uri) as a, MqttChannel(broker_uri) as b:
            rec = Recorder()
            b.subscribe("qvote/e1/vote/+", rec)
            time.sleep(0.2)
            e = env(x="y")
            a.publish("qvote/e1/vote/s1", e)
            assert rec.event.wait(5.0)
            assert rec.seen[0][0] == "qvote/e1/vote/s1"
            assert rec.seen[0][1] == e

    def test_unsubscribe_stops_delivery(self, broker_uri):
        with MqttChannel(broker_uri) as ch:
            rec = Recorder()
            sub = ch.subscribe("u/t", rec)
            time.sleep(0.2)
            ch.unsubscribe(sub)
            time.sleep(0.2)
            ch.publish("u/t", env())
            time.sleep(0.3)
            assert rec.seen == []
