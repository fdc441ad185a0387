"""Lockstep training server.

Clients connect and say hello; an accept thread vets them (protocol
version, observation layout, unique id) and parks them until the training
side picks them up at the next tick boundary. Each tick the server waits
for one :class:`StepUpload` from every connected client, presents the rows
as one batch, and answers every client with its slice of the actions.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from ..env import TRUNCATED
from ..observation import OBS_LAYOUT_VERSION
from ..ppo import SourceClosed, Tick, TrainConfig, train_loop
from .protocol import (PROTOCOL_VERSION, ActionDownload, ClientHello, FormatError, Goodbye, HelloAck,
                       Shutdown, StepUpload, read_frame, send_message)

log = logging.getLogger(__name__)


@dataclass
class _Client:
    hello: ClientHello
    sock: socket.socket
    addr: tuple
    last_tick: int = -1
    upload: StepUpload | None = None
    rows: slice = field(default_factory=lambda: slice(0, 0))

    @property
    def client_id(self) -> int:
        return self.hello.client_id


def parse_address(address) -> tuple[str, int]:
    if isinstance(address, tuple):
        return address
    host, _, port = str(address).rpartition(":")
    return host or "127.0.0.1", int(port)


class ServerSource:
    """Env source backed by remote clients (see :mod:`rangepilot.ppo`).

    ``min_clients`` must have joined before :meth:`start` returns. When every
    client has left, :meth:`step` waits up to ``idle_timeout`` seconds for a
    newcomer and then raises :class:`SourceClosed`.
    """

    def __init__(self, address=("127.0.0.1", 0), *, obs_dim: int, act_dim: int = 5,
                 obs_layout_version: int = OBS_LAYOUT_VERSION, min_clients: int = 1,
                 join_timeout: float = 60.0, idle_timeout: float = 5.0, io_timeout: float = 60.0):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.obs_layout_version = obs_layout_version
        self.min_clients = min_clients
        self.join_timeout = join_timeout
        self.idle_timeout = idle_timeout
        self.io_timeout = io_timeout
        self._listener = socket.create_server(parse_address(address))
        self._listener.settimeout(0.2)
        self.address = self._listener.getsockname()[:2]
        self._lock = threading.Lock()
        self._joined = threading.Condition(self._lock)
        self._waiting: list[_Client] = []
        self._ids: set[int] = set()
        self.clients: list[_Client] = []
        self.tick = 0
        self.batch_sizes: list[int] = []
        self._closed = threading.Event()
        self._acceptor = threading.Thread(target=self._accept_loop, name="aprp-accept", daemon=True)
        self._acceptor.start()

    # -- connection handling (accept thread) -------------------------------------

    def _accept_loop(self):
        while not self._closed.is_set():
            try:
                sock, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._handshake, args=(sock, addr), daemon=True).start()

    def _handshake(self, sock: socket.socket, addr):
        sock.settimeout(self.io_timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            hello = read_frame(sock)
        except (FormatError, OSError) as exc:
            log.warning("dropping %s: bad hello (%s)", addr, exc)
            sock.close()
            return
        reason = self._vet(hello)
        with self._lock:
            if not reason and hello.client_id in self._ids:
                reason = f"duplicate client id {hello.client_id}"
            if not reason:
                self._ids.add(hello.client_id)
        try:
            send_message(sock, HelloAck(not reason, reason))
        except OSError:
            reason = reason or "hello ack failed"
            with self._lock:
                self._ids.discard(hello.client_id)
        if reason:
            log.warning("rejecting %s: %s", addr, reason)
            sock.close()
            return
        log.info("client %d joined from %s with %d agents", hello.client_id, addr, hello.num_agents)
        with self._joined:
            self._waiting.append(_Client(hello, sock, addr))
            self._joined.notify_all()

    def _vet(self, hello) -> str:
        if not isinstance(hello, ClientHello):
            return f"expected HELLO, got {type(hello).__name__}"
        if hello.protocol_version != PROTOCOL_VERSION:
            return f"protocol version {hello.protocol_version}, server speaks {PROTOCOL_VERSION}"
        if hello.obs_layout_version != self.obs_layout_version:
            return f"observation layout {hello.obs_layout_version}, server expects {self.obs_layout_version}"
        if hello.obs_dim != self.obs_dim:
            return f"observation size {hello.obs_dim}, server expects {self.obs_dim}"
        return ""

    # -- lockstep (training thread) ----------------------------------------------

    def _admit(self, wait_for: int, timeout: float) -> None:
        deadline = time.monotonic() + timeout
        with self._joined:
            while len(self.clients) + len(self._waiting) < wait_for:
                left = deadline - time.monotonic()
                if left <= 0:
                    break
                self._joined.wait(left)
            fresh, self._waiting = self._waiting, []
        self.clients.extend(fresh)

    def _drop(self, client: _Client, reason: str, departed: list):
        log.warning("client %d left: %s", client.client_id, reason)
        try:
            client.sock.close()
        except OSError:
            pass
        with self._lock:
            self._ids.discard(client.client_id)
        departed.extend((client.client_id, int(i)) for i in range(client.hello.num_agents))

    def _gather(self, departed: list) -> None:
        """Read one fresh upload from every client; drop the ones that fail."""
        alive = []
        for c in self.clients:
            try:
                while True:
                    msg = read_frame(c.sock)
                    if isinstance(msg, Goodbye):
                        raise ConnectionError(f"goodbye: {msg.reason}")
                    if not isinstance(msg, StepUpload):
                        raise FormatError(f"unexpected {type(msg).__name__}")
                    if msg.client_id != c.client_id:
                        raise FormatError(f"upload claims client id {msg.client_id}")
                    if msg.tick <= c.last_tick:
                        log.warning("client %d: discarding stale tick %d", c.client_id, msg.tick)
                        continue
                    if msg.obs.shape[1] != self.obs_dim:
                        raise FormatError(f"upload has {msg.obs.shape[1]} features")
                    if np.count_nonzero(msg.flags & TRUNCATED) != len(msg.terminal_obs):
                        raise FormatError("terminal observations do not match truncation flags")
                    break
            except (FormatError, OSError) as exc:
                self._drop(c, str(exc), departed)
                continue
            c.last_tick = msg.tick
            c.upload = msg
            alive.append(c)
        self.clients = alive

    def _tick(self, departed: list) -> Tick:
        keys, obs, rew, flags, eids, term = [], [], [], [], [], []
        row = 0
        for c in self.clients:
            u = c.upload
            n = len(u.agent_index)
            c.rows = slice(row, row + n)
            row += n
            keys.extend((c.client_id, int(i)) for i in u.agent_index)
            obs.append(u.obs)
            rew.append(u.reward)
            flags.append(u.flags)
            eids.append(u.episode_id.astype(np.int64))
            t = u.obs.copy()
            t[(u.flags & TRUNCATED) != 0] = u.terminal_obs
            term.append(t)
        self.batch_sizes.append(row)
        if not keys:
            empty = np.zeros((0, self.obs_dim), np.float32)
            return Tick([], empty, np.zeros(0, np.float32), np.zeros(0, np.uint8), empty,
                        np.zeros(0, np.int64), departed)
        return Tick(keys, np.concatenate(obs), np.concatenate(rew), np.concatenate(flags),
                    np.concatenate(term), np.concatenate(eids), departed)

    def _next(self, departed: list) -> Tick:
        self._admit(0, 0.0)
        if not self.clients:
            self._admit(1, self.idle_timeout)
            if not self.clients:
                raise SourceClosed("no clients connected")
        self._gather(departed)
        if not self.clients:
            raise SourceClosed("all clients left")
        return self._tick(departed)

    @property
    def pending(self) -> int:
        """Clients connected so far, whether or not a tick has picked them up."""
        with self._lock:
            return len(self.clients) + len(self._waiting)

    def start(self) -> Tick:
        self._admit(self.min_clients, self.join_timeout)
        if len(self.clients) < self.min_clients:
            raise SourceClosed(f"only {len(self.clients)} of {self.min_clients} clients joined")
        return self._next([])

    def step(self, actions, log_prob=None, value=None) -> Tick:
        actions = np.asarray(actions, dtype=np.float32)
        n = len(actions)
        log_prob = np.zeros(n, np.float32) if log_prob is None else log_prob
        value = np.zeros(n, np.float32) if value is None else value
        departed: list = []
        for c in list(self.clients):
            r = c.rows
            msg = ActionDownload(c.client_id, c.upload.tick, c.upload.agent_index, actions[r],
                                 log_prob[r], value[r])
            try:
                send_message(c.sock, msg)
            except OSError as exc:
                self.clients.remove(c)
                self._drop(c, str(exc), departed)
        self.tick += 1
        return self._next(departed)

    def close(self, reason: str = "training finished"):
        if self._closed.is_set():
            return
        self._closed.set()
        with self._lock:
            everyone = self.clients + self._waiting
            self._waiting = []
        for c in everyone:
            try:
                send_message(c.sock, Shutdown(reason))
            except OSError:
                pass
            c.sock.close()
        self.clients = []
        self._listener.close()
        self._acceptor.join(timeout=2.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(address, model, config: TrainConfig, *, min_clients: int = 1, evaluator=None,
          on_iteration=None, on_ready=None, **source_kw):
    """Host ``model`` and train it on data streamed from rollout clients.

    ``on_ready(address)`` is called once the socket listens (handy with port 0).
    Returns ``(model, metrics)`` like :func:`rangepilot.ppo.train_loop`.
    """
    with ServerSource(address, obs_dim=model.obs_dim, act_dim=model.act_dim,
                      obs_layout_version=model.obs_layout_version, min_clients=min_clients,
                      **source_kw) as source:
        if on_ready is not None:
            on_ready(source.address)
        return train_loop(config, source, model, evaluator=evaluator, on_iteration=on_iteration)
