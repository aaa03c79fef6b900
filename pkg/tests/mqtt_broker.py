"""Minimal MQTT 3.1.1 broker for integration tests.

Handles CONNECT, PUBLISH (QoS 0/1), SUBSCRIBE, UNSUBSCRIBE, PINGREQ and
DISCONNECT; no retained messages, sessions or QoS 2. Enough to drive paho.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading

from qvote.transport import topic_matches


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf += chunk
    return buf


def _read_packet(sock: socket.socket) -> tuple[int, int, bytes]:
    first = _read_exact(sock, 1)[0]
    length, shift = 0, 0
    while True:
        byte = _read_exact(sock, 1)[0]
        length |= (byte & 0x7F) << shift
        if not byte & 0x80:
            break
        shift += 7
    return first >> 4, first & 0x0F, _read_exact(sock, length)


def _packet(kind: int, flags: int, body: bytes) -> bytes:
    n, out = len(body), bytearray([(kind << 4) | flags])
    while True:
        byte, n = n & 0x7F, n >> 7
        out.append(byte | (0x80 if n else 0))
        if not n:
            break
    return bytes(out) + body


def _string(data: bytes, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("!H", data, pos)
    return data[pos + 2 : pos + 2 + n].decode("utf-8"), pos + 2 + n


class _Client(socketserver.BaseRequestHandler):
    def setup(self) -> None:
        self.lock = threading.Lock()
        self.filters: dict[str, int] = {}
        self.next_id = 1

    def send(self, data: bytes) -> None:
        with self.lock:
            self.request.sendall(data)

    def deliver(self, topic: str, payload: bytes, qos: int) -> None:
        body = struct.pack("!H", len(topic.encode())) + topic.encode()
        if qos:
            with self.lock:
                pid, self.next_id = self.next_id, self.next_id % 65535 + 1
            body += struct.pack("!H", pid)
        self.send(_packet(3, qos << 1, body + payload))

    def handle(self) -> None:
        broker: MiniBroker = self.server.broker  # type: ignore[attr-defined]
        try:
            while True:
                kind, flags, body = _read_packet(self.request)
                if kind == 1:  # CONNECT
                    broker.add(self)
                    self.send(_packet(2, 0, b"\x00\x00"))
                elif kind == 3:  # PUBLISH
                    qos = (flags >> 1) & 3
                    topic, pos = _string(body, 0)
                    if qos:
                        pid = body[pos : pos + 2]
                        pos += 2
                        self.send(_packet(4, 0, pid))
                    broker.route(topic, body[pos:], qos)
                elif kind == 8:  # SUBSCRIBE
                    pid, pos, granted = body[:2], 2, bytearray()
                    while pos < len(body):
                        topic, pos = _string(body, pos)
                        qos = min(body[pos], 1)
                        pos += 1
                        self.filters[topic] = qos
                        granted.append(qos)
                    self.send(_packet(9, 0, pid + bytes(granted)))
                elif kind == 10:  # UNSUBSCRIBE
                    pid, pos = body[:2], 2
                    while pos < len(body):
                        topic, pos = _string(body, pos)
                        self.filters.pop(topic, None)
                    self.send(_packet(11, 0, pid))
                elif kind == 12:  # PINGREQ
                    self.send(_packet(13, 0, b""))
                elif kind == 14:  # DISCONNECT
                    break
        except (ConnectionError, OSError):
            pass
        finally:
            broker.remove(self)


class MiniBroker:
    def __init__(self, host: str = "127.0.0.1") -> None:
        self._clients: set[_Client] = set()
        self._lock = threading.Lock()
        self.server = socketserver.ThreadingTCPServer((host, 0), _Client)
        self.server.daemon_threads = True
        self.server.broker = self  # type: ignore[attr-defined]
        self.host, self.port = self.server.server_address[:2]
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def uri(self) -> str:
        return f"mqtt://{self.host}:{self.port}"

    def add(self, client: _Client) -> None:
        with self._lock:
            self._clients.add(client)

    def remove(self, client: _Client) -> None:
        with self._lock:
            self._clients.discard(client)

    def route(self, topic: str, payload: bytes, qos: int) -> None:
        with self._lock:
            clients = list(self._clients)
        for client in clients:
            levels = [q for f, q in list(client.filters.items()) if topic_matches(f, topic)]
            if levels:
                try:
                    client.deliver(topic, payload, min(qos, max(levels)))
                except OSError:
                    pass

    def __enter__(self) -> MiniBroker:
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.server.shutdown()
        self.server.server_close()
