"""
Round transports. Both move encoded frames between the server and the
clients and record every frame in a wire log, so the two can be compared
byte for byte and scanned for what leaves a site.
"""

import concurrent.futures
import socket
import threading
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

from errors import ConfigError, FedSimError, ProtocolError
from federated.client import Client
from federated.messages import (
    GradientReport,
    ModelBroadcast,
    Shutdown,
    decode,
    encode,
    read_frame,
    send_frame,
)
from utils import log


@dataclass
class WireLog:
    frames: List[Tuple[str, bytes]] = field(default_factory=list)    # (direction, frame)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, direction: str, frame: bytes) -> None:
        with self._lock:
            self.frames.append((direction, frame))

    @property
    def total_bytes(self) -> int:
        return sum(len(f) for _, f in self.frames)


def parse_listen(listen: str) -> Tuple[str, int]:
    host, sep, port = listen.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"Listen address must be host:port, got '{listen}'", key_path="federated.listen")
    return host or "127.0.0.1", int(port)


# =============================================================================
# In-process
# =============================================================================


class InProcTransport:
    """Clients run in worker threads of this process; frames still go through encode/decode."""

    def __init__(self, clients: Sequence[Client], timeout: float, threads: int = 1):
        self.clients = list(clients)
        self.timeout = timeout
        self.threads = max(1, min(threads, len(self.clients)))
        self.wire = WireLog()
        self._executor = concurrent.futures.ThreadPoolExecutor(max_workers=self.threads)

    def _client_round(self, client: Client, frame: bytes) -> bytes:
        msg = decode(frame)
        reply = encode(client.run(msg))
        self.wire.record(f"{client.site_id}->server", reply)
        return reply

    def exchange(self, broadcast: ModelBroadcast) -> List[GradientReport]:
        frame = encode(broadcast)
        futures = []
        for client in self.clients:
            self.wire.record(f"server->{client.site_id}", frame)
            futures.append(self._executor.submit(self._client_round, client, frame))
        try:
            replies = [f.result(timeout=self.timeout) for f in futures]
        except concurrent.futures.TimeoutError as exc:
            raise ProtocolError(f"Round {broadcast.round}: no report within {self.timeout}s") from exc
        return [decode(r) for r in replies]

    def close(self, round_index: int) -> None:
        frame = encode(Shutdown(round_index))
        for client in self.clients:
            self.wire.record(f"server->{client.site_id}", frame)
        self._executor.shutdown(wait=True)


# =============================================================================
# TCP
# =============================================================================


def serve_client(client: Client, address: Tuple[str, int], timeout: float) -> None:
    """Client loop: connect, answer broadcasts until shutdown."""
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.settimeout(None)
        while True:
            msg = decode(read_frame(sock))
            if isinstance(msg, Shutdown):
                log("Client", f"[{client.site_id}] shutdown at round {msg.round}")
                return
            send_frame(sock, encode(client.run(msg)))


class TcpTransport:
    """
    The server listens; every client connects from its own thread. A round
    sends the broadcast on each connection and reads one report from each.
    A missing report or a dropped connection aborts the run with a ProtocolError.
    """

    def __init__(self, clients: Sequence[Client], listen: str, timeout: float):
        self.clients = list(clients)
        self.timeout = timeout
        self.wire = WireLog()
        self.errors: List[BaseException] = []
        host, port = parse_listen(listen)
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(timeout)
        self.address = self._listener.getsockname()[:2]
        log("Transport", f"Listening on {self.address[0]}:{self.address[1]} for {len(self.clients)} site(s)")
        self._threads = [threading.Thread(target=self._client_main, args=(c,), daemon=True,
                                          name=f"site-{c.site_id}") for c in self.clients]
        for t in self._threads:
            t.start()
        self._conns: List[socket.socket] = []
        try:
            for _ in self.clients:
                conn, _ = self._listener.accept()
                conn.settimeout(timeout)
                self._conns.append(conn)
        except socket.timeout as exc:
            self._abort()
            raise ProtocolError(f"Only {len(self._conns)} of {len(self.clients)} sites connected "
                                f"within {timeout}s") from exc

    def _client_main(self, client: Client) -> None:
        try:
            serve_client(client, self.address, self.timeout)
        except (OSError, FedSimError) as exc:
            self.errors.append(exc)
            log("Transport", f"[{client.site_id}] client stopped: {exc}", "ERROR")

    def exchange(self, broadcast: ModelBroadcast) -> List[GradientReport]:
        frame = encode(broadcast)
        try:
            for i, conn in enumerate(self._conns):
                self.wire.record(f"server->conn{i}", frame)
                send_frame(conn, frame)
            replies = []
            for i, conn in enumerate(self._conns):
                reply = read_frame(conn)
                self.wire.record(f"conn{i}->server", reply)
                replies.append(reply)
        except (socket.timeout, OSError) as exc:
            self._abort()
            raise ProtocolError(f"Round {broadcast.round}: site connection failed ({exc})") from exc
        except ProtocolError:
            self._abort()
            raise
        return [decode(r) for r in replies]

    def _abort(self) -> None:
        for conn in self._conns:
            conn.close()
        self._listener.close()

    def close(self, round_index: int) -> None:
        frame = encode(Shutdown(round_index))
        for i, conn in enumerate(self._conns):
            self.wire.record(f"server->conn{i}", frame)
            try:
                send_frame(conn, frame)
            except OSError:
                pass
        for t in self._threads:
            t.join(timeout=self.timeout)
        self._abort()
