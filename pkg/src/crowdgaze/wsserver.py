"""Small threaded WebSocket (RFC 6455) server for the telemetry endpoint.

Text frames only, which is all the JSON protocol needs. Each client gets a
bounded outbound queue drained by its own writer thread: a slow client
fills its backlog and is disconnected instead of stalling the pipeline.
"""
from __future__ import annotations

import base64
import hashlib
import logging
import queue
import socket
import struct
import threading

log = logging.getLogger(__name__)

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
BACKLOG_LIMIT = 64

OP_CONT = 0x0
OP_TEXT = 0x1
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA


class HandshakeError(IOError):
    pass


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("socket closed mid-frame")
        buf += chunk
    return buf


def _accept_key(key: str) -> str:
    digest = hashlib.sha1((key + WS_GUID).encode()).digest()
    return base64.b64encode(digest).decode()


def perform_handshake(sock: socket.socket) -> None:
    data = b""
    while b"\r\n\r\n" not in data:
        chunk = sock.recv(4096)
        if not chunk:
            raise HandshakeError("client closed during handshake")
        data += chunk
        if len(data) > 65536:
            raise HandshakeError("oversized handshake request")
    headers = {}
    for line in data.split(b"\r\n")[1:]:
        if b":" in line:
            k, _, v = line.partition(b":")
            headers[k.strip().lower()] = v.strip()
    key = headers.get(b"sec-websocket-key")
    if key is None or b"websocket" not in headers.get(b"upgrade", b"").lower():
        raise HandshakeError("not a websocket upgrade request")
    response = (
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {_accept_key(key.decode())}\r\n"
        "\r\n")
    sock.sendall(response.encode())


def read_message(sock: socket.socket) -> tuple[int, bytes]:
    """One complete message: (opcode, payload); reassembles fragments."""
    opcode = None
    payload = b""
    while True:
        head = _read_exact(sock, 2)
        fin = head[0] & 0x80
        op = head[0] & 0x0F
        masked = head[1] & 0x80
        length = head[1] & 0x7F
        if length == 126:
            (length,) = struct.unpack("!H", _read_exact(sock, 2))
        elif length == 127:
            (length,) = struct.unpack("!Q", _read_exact(sock, 8))
        mask = _read_exact(sock, 4) if masked else None
        data = _read_exact(sock, length) if length else b""
        if mask:
            data = bytes(b ^ mask[i % 4] for i, b in enumerate(data))
        if op in (OP_CLOSE, OP_PING, OP_PONG):
            return op, data
        if opcode is None:
            opcode = op
        payload += data
        if fin:
            return opcode, payload


def frame_message(opcode: int, payload: bytes) -> bytes:
    header = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        header += bytes([n])
    elif n < 65536:
        header += bytes([126]) + struct.pack("!H", n)
    else:
        header += bytes([127]) + struct.pack("!Q", n)
    return header + payload


class Client:
    """One connected peer with its bounded outbound queue."""

    _next_id = 0

    def __init__(self, sock: socket.socket, addr):
        self.sock = sock
        self.addr = addr
        self.outbox: queue.Queue[bytes | None] = queue.Queue(maxsize=BACKLOG_LIMIT)
        self.alive = True
        Client._next_id += 1
        self.id = Client._next_id

    def send_text(self, text: str) -> bool:
        """Queue a text frame; False (and disconnect) when the backlog is full."""
        if not self.alive:
            return False
        try:
            self.outbox.put_nowait(frame_message(OP_TEXT, text.encode()))
            return True
        except queue.Full:
            log.warning("client %d backlog overflow; disconnecting", self.id)
            self.close()
            return False

    def close(self) -> None:
        if self.alive:
            self.alive = False
            try:
                self.outbox.put_nowait(None)
            except queue.Full:
                # writer drains the queue anyway; wake it by closing the socket
                try:
                    self.sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass


class WebSocketServer:
    """accept/read/write threads around a message callback."""

    def __init__(self, host: str, port: int, on_message, on_connect=None,
                 on_disconnect=None):
        self.on_message = on_message
        self.on_connect = on_connect
        self.on_disconnect = on_disconnect
        self._clients: dict[int, Client] = {}
        self._lock = threading.Lock()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(8)
        self.port = self._sock.getsockname()[1]
        self._stopping = False
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)

    def start(self) -> None:
        self._accept_thread.start()

    def stop(self) -> None:
        self._stopping = True
        try:
            self._sock.close()
        except OSError:
            pass
        with self._lock:
            clients = list(self._clients.values())
        for client in clients:
            client.close()

    def clients(self) -> list[Client]:
        with self._lock:
            return [c for c in self._clients.values() if c.alive]

    def broadcast(self, text: str) -> None:
        for client in self.clients():
            client.send_text(text)

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                sock, addr = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_client, args=(sock, addr),
                             daemon=True).start()

    def _serve_client(self, sock: socket.socket, addr) -> None:
        try:
            perform_handshake(sock)
        except (HandshakeError, OSError) as e:
            log.warning("handshake with %s failed: %s", addr, e)
            sock.close()
            return
        client = Client(sock, addr)
        with self._lock:
            self._clients[client.id] = client
        writer = threading.Thread(target=self._write_loop, args=(client,), daemon=True)
        writer.start()
        if self.on_connect:
            self.on_connect(client)
        try:
            while client.alive:
                op, payload = read_message(sock)
                if op == OP_CLOSE:
                    break
                if op == OP_PING:
                    client.outbox.put(frame_message(OP_PONG, payload))
                    continue
                if op == OP_TEXT:
                    self.on_message(client, payload.decode("utf-8", "replace"))
        except (ConnectionError, OSError):
            pass
        finally:
            client.close()
            with self._lock:
                self._clients.pop(client.id, None)
            if self.on_disconnect:
                self.on_disconnect(client)

    def _write_loop(self, client: Client) -> None:
        try:
            while True:
                item = client.outbox.get()
                if item is None:
                    break
                client.sock.sendall(item)
        except OSError:
            client.alive = False
        finally:
            try:
                client.sock.close()
            except OSError:
                pass
