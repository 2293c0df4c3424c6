"""Simulated P2P overlay: peer lookup, unicast, trainer-gated broadcast, rooms.

Delivery is synchronous, lossless and FIFO per sender/recipient pair.  P2P
identities are separate key pairs; the only link to a chain account is the
explicit binding a trainer attaches to a broadcast.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from . import crypto
from .encoding import framed

UNICAST, BROADCAST, ROOM = "Unicast", "Broadcast", "Room"


class Rejected(Exception):
    pass


@dataclass(frozen=True)
class P2pAccount:
    keypair: crypto.KeyPair

    @property
    def p2p_id(self) -> bytes:
        return self.keypair.public


@dataclass(frozen=True)
class Binding:
    chain_account: bytes
    chain_signature: bytes


def binding_message(p2p_id: bytes) -> bytes:
    return b"genie-p2p-binding|" + p2p_id


def make_binding(chain_keypair: crypto.KeyPair, p2p_id: bytes) -> Binding:
    return Binding(chain_keypair.public, crypto.sign(chain_keypair.secret, binding_message(p2p_id)).value)


@dataclass(frozen=True)
class P2pMessage:
    kind: str
    sender_p2p: bytes
    topic: str
    payload: bytes
    binding: Binding | None
    sender_signature: bytes

    @staticmethod
    def body(kind, sender, topic, payload, binding) -> bytes:
        b = framed(binding.chain_account, binding.chain_signature) if binding else b""
        return framed(b"genie-p2p", kind.encode(), sender, topic.encode(), payload, b)

    @classmethod
    def signed(cls, acct: P2pAccount, kind: str, payload: bytes, topic: str = "", binding: Binding | None = None):
        sig = crypto.sign(acct.keypair.secret, cls.body(kind, acct.p2p_id, topic, payload, binding)).value
        return cls(kind, acct.p2p_id, topic, payload, binding, sig)

    def signature_ok(self) -> bool:
        body = self.body(self.kind, self.sender_p2p, self.topic, self.payload, self.binding)
        return crypto.verify(self.sender_p2p, body, self.sender_signature)


class Network:
    """Hub that owns every peer inbox and the delivery trace."""

    def __init__(self, contracts=None, clock=None):
        self.contracts = contracts  # mined chain state, for trainer checks
        self.clock = clock
        self._endpoints: dict[bytes, str] = {}
        self.inboxes: dict[bytes, deque] = {}
        self.rooms: dict[str, list[bytes]] = {}
        self.trace: list[str] = []
        self.delivered: list[tuple[bytes, P2pMessage]] = []

    def p2p_register(self, account: P2pAccount) -> str:
        if account.p2p_id not in self._endpoints:
            self._endpoints[account.p2p_id] = f"node-{len(self._endpoints):04d}"
            self.inboxes[account.p2p_id] = deque()
        return self._endpoints[account.p2p_id]

    def find_peer(self, p2p_id: bytes) -> str | None:
        return self._endpoints.get(p2p_id)

    def _deliver(self, to: bytes, msg: P2pMessage) -> None:
        self.inboxes[to].append(msg)
        self.delivered.append((to, msg))
        tick = self.clock.now if self.clock is not None else 0
        self.trace.append(f"{tick} {msg.kind} {msg.sender_p2p.hex()} {to.hex()}")

    def _require_registered(self, acct: P2pAccount) -> None:
        if acct.p2p_id not in self._endpoints:
            raise Rejected("sender not registered")

    def send_unicast(self, sender: P2pAccount, to: bytes, payload: bytes) -> bool:
        self._require_registered(sender)
        if to not in self._endpoints:
            return False
        self._deliver(to, P2pMessage.signed(sender, UNICAST, payload))
        return True

    def check_binding(self, p2p_id: bytes, binding: Binding | None) -> None:
        if binding is None:
            raise Rejected("broadcast requires a trainer binding")
        if not crypto.verify(binding.chain_account, binding_message(p2p_id), binding.chain_signature):
            raise Rejected("binding signature invalid for this p2p id")
        if self.contracts is None or not self.contracts.is_trainer(binding.chain_account):
            raise Rejected("bound chain account is not a registered model trainer")

    def send_broadcast(self, sender: P2pAccount, payload: bytes, binding: Binding | None) -> int:
        self._require_registered(sender)
        self.check_binding(sender.p2p_id, binding)
        msg = P2pMessage.signed(sender, BROADCAST, payload, binding=binding)
        n = 0
        for peer in self._endpoints:
            if peer != sender.p2p_id:
                self._deliver(peer, msg)
                n += 1
        return n

    def join_room(self, peer: P2pAccount, topic: str) -> None:
        self._require_registered(peer)
        members = self.rooms.setdefault(topic, [])
        if peer.p2p_id not in members:
            members.append(peer.p2p_id)

    def leave_room(self, peer: P2pAccount, topic: str) -> None:
        members = self.rooms.get(topic, [])
        if peer.p2p_id in members:
            members.remove(peer.p2p_id)

    def post_room(self, peer: P2pAccount, topic: str, payload: bytes) -> int:
        members = self.rooms.get(topic, [])
        if peer.p2p_id not in members:
            raise Rejected("poster has not joined the room")
        msg = P2pMessage.signed(peer, ROOM, payload, topic=topic)
        n = 0
        for m in list(members):
            if m != peer.p2p_id:
                self._deliver(m, msg)
                n += 1
        return n

    def drain(self, p2p_id: bytes) -> list[P2pMessage]:
        box = self.inboxes.get(p2p_id, deque())
        out = list(box)
        box.clear()
        return out
