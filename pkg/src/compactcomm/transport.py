"""Reliable ordered message transports between simulated devices.

Both implementations move opaque byte frames between (src, dst) pairs and
preserve per-channel FIFO order. The in-process transport uses thread-safe
queues directly; the socket transport runs length-prefixed frames
(4-byte big-endian length + frame body) over loopback TCP, one connection
per device pair, with reader threads draining sockets into inbox queues so
that concurrent all-to-all sends cannot deadlock on kernel buffers.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading

_LEN = struct.Struct(">I")
RECV_TIMEOUT_S = 30.0


class TransportError(RuntimeError):
    pass


class InprocTransport:
    def __init__(self, devices):
        self.devices = devices
        self._boxes = {
            (dst, src): queue.Queue()
            for dst in range(devices)
            for src in range(devices)
            if src != dst
        }

    def send(self, src, dst, frame):
        self._boxes[(dst, src)].put(bytes(frame))

    def recv(self, dst, src):
        try:
            return self._boxes[(dst, src)].get(timeout=RECV_TIMEOUT_S)
        except queue.Empty:
            raise TransportError(f"timeout receiving {src} -> {dst}") from None

    def close(self):
        pass


class SocketTransport:
    """Loopback TCP mesh; one bidirectional connection per device pair."""

    def __init__(self, devices, port_base):
        self.devices = devices
        self._socks = {}
        self._boxes = {
            (dst, src): queue.Queue()
            for dst in range(devices)
            for src in range(devices)
            if src != dst
        }
        self._readers = []
        self._closed = threading.Event()

        listeners = []
        try:
            for d in range(devices):
                srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                srv.bind(("127.0.0.1", port_base + d))
                srv.listen(devices)
                listeners.append(srv)
            # j > i dials i; the dialer announces itself with one id byte
            pending = {}
            for j in range(devices):
                for i in range(j):
                    c = socket.create_connection(("127.0.0.1", port_base + i), timeout=10)
                    c.sendall(bytes([j]))
                    pending[(j, i)] = c
            for i in range(devices):
                for _ in range(devices - 1 - i):
                    c, _addr = listeners[i].accept()
                    j = c.recv(1)[0]
                    self._register(i, j, c)
            for (j, i), c in pending.items():
                self._register(j, i, c)
        except OSError as exc:
            raise TransportError(f"socket mesh setup failed: {exc}") from exc
        finally:
            for srv in listeners:
                srv.close()
        for (owner, peer), sock in self._socks.items():
            t = threading.Thread(target=self._reader, args=(owner, peer, sock), daemon=True)
            t.start()
            self._readers.append(t)

    def _register(self, owner, peer, sock):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._socks[(owner, peer)] = sock

    def _reader(self, owner, peer, sock):
        try:
            while not self._closed.is_set():
                head = self._read_exact(sock, _LEN.size)
                if head is None:
                    return
                (n,) = _LEN.unpack(head)
                body = self._read_exact(sock, n)
                if body is None:
                    return
                self._boxes[(owner, peer)].put(body)
        except OSError:
            return

    @staticmethod
    def _read_exact(sock, n):
        buf = b""
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                return None
            buf += chunk
        return buf

    def send(self, src, dst, frame):
        frame = bytes(frame)
        try:
            self._socks[(src, dst)].sendall(_LEN.pack(len(frame)) + frame)
        except OSError as exc:
            raise TransportError(f"send {src} -> {dst} failed: {exc}") from exc

    def recv(self, dst, src):
        try:
            return self._boxes[(dst, src)].get(timeout=RECV_TIMEOUT_S)
        except queue.Empty:
            raise TransportError(f"timeout receiving {src} -> {dst}") from None

    def close(self):
        self._closed.set()
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


def make_transport(kind, devices, port_base=38200):
    if kind == "inproc":
        return InprocTransport(devices)
    if kind == "socket":
        return SocketTransport(devices, port_base)
    raise ValueError(f"unknown transport kind {kind!r}")
