"""Rollout client: owns several simulator instances and streams their agents to the server."""

from __future__ import annotations

import logging
import os
import socket
import time
from dataclasses import dataclass

import numpy as np

from ..env import TRUNCATED, make_env
from ..observation import OBS_LAYOUT_VERSION
from .protocol import (ActionDownload, ClientHello, FormatError, Goodbye, HelloAck, Shutdown, StepUpload,
                       read_frame, send_message)
from .server import parse_address

log = logging.getLogger(__name__)


class ClientRejected(RuntimeError):
    """The server refused the hello; retrying would not help."""


class ServerUnreachable(ConnectionError):
    pass


@dataclass(frozen=True)
class Backoff:
    """Exponential reconnect delays: ``initial * factor**k`` capped at ``maximum``."""
    initial: float = 0.05
    factor: float = 2.0
    maximum: float = 2.0
    attempts: int = 8

    def delays(self):
        d = self.initial
        for _ in range(self.attempts):
            yield min(d, self.maximum)
            d *= self.factor


class ProcessGroup:
    """``num_processes`` independent environments stepped together.

    Agent ``k`` of process ``p`` is slot ``p * agents_per_process + k``.
    Process ``p`` is seeded with ``seed + p``.
    """

    def __init__(self, env_config, num_processes: int, agents_per_process: int, seed: int):
        if num_processes < 1 or agents_per_process < 1:
            raise ValueError("num_processes and agents_per_process must be >= 1")
        self.env_config = env_config
        self.num_processes = num_processes
        self.agents_per_process = agents_per_process
        self.seed = seed
        self.envs = []

    @property
    def num_agents(self) -> int:
        return self.num_processes * self.agents_per_process

    @property
    def obs_dim(self) -> int:
        return self.env_config.obs_dim

    def reset(self) -> tuple[np.ndarray, np.ndarray]:
        self.envs = [make_env(self.env_config, self.agents_per_process, self.seed + p)
                     for p in range(self.num_processes)]
        obs = np.concatenate([e.reset() for e in self.envs])
        return obs, self.episode_ids()

    def episode_ids(self) -> np.ndarray:
        return np.concatenate([e.episode_id for e in self.envs])

    def step(self, actions: np.ndarray):
        """Step every process; returns ``(obs, reward, flags, terminal_obs_rows, episode_id)``."""
        n = self.agents_per_process
        results = [e.step(actions[p * n:(p + 1) * n]) for p, e in enumerate(self.envs)]
        obs = np.concatenate([r.obs for r in results])
        reward = np.concatenate([r.reward for r in results])
        flags = np.concatenate([r.flags for r in results])
        terminal = np.concatenate([r.terminal_obs for r in results])
        eid = np.concatenate([r.episode_id for r in results])
        return obs, reward, flags, terminal[(flags & TRUNCATED) != 0], eid


def _connect(address, backoff: Backoff, timeout: float) -> socket.socket:
    last = None
    for delay in [0.0, *backoff.delays()]:
        if delay:
            time.sleep(delay)
        try:
            sock = socket.create_connection(address, timeout=timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError as exc:
            last = exc
    raise ServerUnreachable(f"could not reach {address[0]}:{address[1]}: {last}")


def _session(sock, group: ProcessGroup, client_id: int, mode: int, max_ticks) -> tuple[str, int]:
    send_message(sock, ClientHello(client_id, group.num_processes, group.agents_per_process,
                                   OBS_LAYOUT_VERSION, group.obs_dim, mode))
    ack = read_frame(sock)
    if not isinstance(ack, HelloAck):
        raise FormatError(f"expected HELLO_ACK, got {type(ack).__name__}")
    if not ack.accepted:
        raise ClientRejected(ack.reason)
    # a (re)connection always starts fresh episodes
    obs, eid = group.reset()
    slots = np.arange(group.num_agents, dtype=np.uint32)
    n = group.num_agents
    tick = 0
    send_message(sock, StepUpload(client_id, tick, slots, eid, obs, np.zeros(n, np.float32),
                                  np.zeros(n, np.uint8)))
    while max_ticks is None or tick < max_ticks:
        msg = read_frame(sock)
        if isinstance(msg, Shutdown):
            return f"shutdown: {msg.reason}", tick
        if not isinstance(msg, ActionDownload):
            raise FormatError(f"unexpected {type(msg).__name__}")
        if msg.tick != tick:
            log.warning("ignoring actions for tick %d (at tick %d)", msg.tick, tick)
            continue
        actions = np.zeros((n, msg.action.shape[1]), np.float32)
        actions[msg.agent_index] = msg.action
        obs, reward, flags, terminal, eid = group.step(actions)
        tick += 1
        send_message(sock, StepUpload(client_id, tick, slots, eid, obs, reward, flags, terminal))
    send_message(sock, Goodbye(client_id, "tick budget reached"))
    return "tick budget reached", tick


def run_client(server_address, env_config, num_processes: int = 1, agents_per_process: int = 1, *,
               client_id: int | None = None, seed: int = 0, max_ticks: int | None = None,
               backoff: Backoff = Backoff(), io_timeout: float = 60.0) -> str:
    """Connect, stream rollouts until the server shuts down, reconnect on failure.

    Returns the reason the session ended. Raises :class:`ClientRejected` if the
    hello is refused and :class:`ServerUnreachable` once the backoff schedule
    is exhausted.
    """
    address = parse_address(server_address)
    if client_id is None:
        client_id = int.from_bytes(os.urandom(8), "little")
    group = ProcessGroup(env_config, num_processes, agents_per_process, seed)
    mode = int(getattr(env_config, "mode", 0))
    while True:
        sock = _connect(address, backoff, io_timeout)
        try:
            sock.settimeout(io_timeout)
            reason, ticks = _session(sock, group, client_id, mode, max_ticks)
            log.info("client %d finished after %d ticks (%s)", client_id, ticks, reason)
            return reason
        except (ConnectionError, socket.timeout, FormatError) as exc:
            if isinstance(exc, ServerUnreachable):
                raise
            log.warning("client %d lost the server (%s); reconnecting", client_id, exc)
        finally:
            sock.close()
