"""In-process coordinator/agent simulation of fusion rounds.

The coordinator broadcasts the current global prior, each agent fits a local
Laplace posterior on its fixed shard, and the uploads are fused into the next
round's prior. Messages go through the binary wire format so the same
exchange could run over a real transport.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from . import mlp
from .fusion import Rule, fuse_cil, fuse_cip
from .gaussian import DIAGONAL, GaussianBelief, IndefinitePrecision
from .local_inference import LabeledShard, TrainConfig, laplace_fit
from .mlp import MlpSpec

log = logging.getLogger(__name__)

WIRE_VERSION = 1
_HEADER = struct.Struct("<BBIIIB")


class MessageKind(IntEnum):
    PRIOR_BROADCAST = 1
    POSTERIOR_UPLOAD = 2


class MalformedMessage(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AgentMessage:
    kind: MessageKind
    round: int
    agent_id: int
    belief: GaussianBelief

    def __post_init__(self):
        object.__setattr__(self, "kind", MessageKind(self.kind))
        if self.round < 1:
            raise ValueError("round numbers start at 1")


def serialize_message(msg: AgentMessage) -> bytes:
    """Little-endian: version, kind, u32 round, u32 agent, u32 dim, storage byte,
    f64 mean, f64 packed precision (lower triangle row-major, or diagonal)."""
    b = msg.belief
    d = b.dim
    storage = 1 if b.kind == DIAGONAL else 0
    packed = b.precision if storage else b.precision[np.tril_indices(d)]
    header = _HEADER.pack(WIRE_VERSION, int(msg.kind), msg.round, msg.agent_id, d, storage)
    return header + np.asarray(b.mean, dtype="<f8").tobytes() + np.asarray(packed, dtype="<f8").tobytes()


def deserialize_message(buf: bytes) -> AgentMessage:
    if len(buf) < _HEADER.size:
        raise MalformedMessage(f"buffer of {len(buf)} bytes is shorter than the header")
    version, kind, rnd, agent, d, storage = _HEADER.unpack_from(buf)
    if version != WIRE_VERSION:
        raise MalformedMessage(f"wire version {version}, expected {WIRE_VERSION}")
    if kind not in (1, 2) or storage not in (0, 1):
        raise MalformedMessage("unknown message kind or storage byte")
    n_prec = d if storage else d * (d + 1) // 2
    expected = _HEADER.size + 8 * (d + n_prec)
    if len(buf) != expected:
        raise MalformedMessage(f"buffer of {len(buf)} bytes, expected {expected}")
    body = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    mean, packed = body[:d], body[d:]
    if storage:
        precision = packed
    else:
        precision = np.zeros((d, d))
        precision[np.tril_indices(d)] = packed
        precision = precision + np.tril(precision, -1).T
    return AgentMessage(MessageKind(kind), rnd, agent, GaussianBelief(mean, precision))


def shard_dataset(dataset: LabeledShard, m: int, seed: int) -> list[LabeledShard]:
    """Seeded random partition into ``m`` near-equal shards.

    The first ``N mod m`` shards get one extra point.
    """
    if m < 1:
        raise ValueError("need at least one agent")
    if m > dataset.n:
        raise ValueError(f"cannot split {dataset.n} points across {m} agents")
    if m == 1:
        return [LabeledShard(dataset.features, dataset.targets, agent_id=0)]
    perm = np.random.default_rng(seed).permutation(dataset.n)
    return [dataset.subset(np.sort(idx), agent_id=i) for i, idx in enumerate(np.array_split(perm, m))]


@dataclass
class RoundState:
    t: int
    global_belief: GaussianBelief
    agent_posteriors: list[GaussianBelief] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)
    fell_back: bool = False
    seed: int = 0


def evaluate(spec: MlpSpec, belief: GaussianBelief, test: LabeledShard) -> dict[str, float]:
    return {
        "test_accuracy": mlp.accuracy(spec, belief.mean, test.features, test.targets),
        "mean_param_variance": float(np.mean(belief.variances())),
    }


def seeded_init(spec: MlpSpec, seed: int) -> np.ndarray:
    """Shared network initialization used by every agent in the first round."""
    return mlp.init_params(spec, np.random.default_rng(np.random.SeedSequence([seed, 0xF00D])))


def initial_state(spec: MlpSpec, q0: float, seed: int, test: LabeledShard | None = None) -> RoundState:
    """Round-0 state holding the zero-mean isotropic prior of variance ``q0``."""
    prior = GaussianBelief(np.zeros(spec.parameter_count), np.full(spec.parameter_count, 1.0 / q0))
    return RoundState(0, prior, [], evaluate(spec, prior, test) if test is not None else {}, seed=seed)


class Agent:
    def __init__(self, agent_id: int, shard: LabeledShard, spec: MlpSpec, cfg: TrainConfig):
        self.agent_id = agent_id
        self.shard = shard
        self.spec = spec
        self.cfg = cfg

    def handle(self, payload: bytes, init: np.ndarray | None = None) -> bytes:
        """Answer a prior broadcast with a local posterior upload.

        Training starts at ``init`` when given, otherwise at the prior mean.
        """
        msg = deserialize_message(payload)
        if msg.kind is not MessageKind.PRIOR_BROADCAST:
            raise MalformedMessage("agent expected a prior broadcast")
        ctx = f"(round {msg.round}, agent {self.agent_id})"
        post = laplace_fit(msg.belief, self.shard, self.spec, self.cfg, init=init, context=ctx)
        return serialize_message(AgentMessage(MessageKind.POSTERIOR_UPLOAD, msg.round, self.agent_id, post))


def fuse_with_fallback(rule: Rule, prior: GaussianBelief, locals_: Sequence[GaussianBelief]) -> tuple[GaussianBelief, bool]:
    if Rule(rule) is Rule.CIP:
        return fuse_cip(locals_).fused, False
    try:
        return fuse_cil(prior, locals_, with_weights=False).fused, False
    except IndefinitePrecision as exc:
        log.warning("CIL fusion failed (%s); falling back to CIP", exc)
        return fuse_cip(locals_).fused, True


def run_round(
    state: RoundState,
    shards: Sequence[LabeledShard],
    spec: MlpSpec,
    cfg: TrainConfig,
    rule: Rule | str,
    test: LabeledShard | None = None,
) -> RoundState:
    """One broadcast / local fit / fuse cycle; the fused belief is the next prior.

    First-round fits start from the shared seeded initialization, later ones
    from the broadcast prior mean.
    """
    t = state.t + 1
    init = seeded_init(spec, state.seed) if state.t == 0 else None
    agents = [Agent(i, s, spec, cfg) for i, s in enumerate(shards)]
    uploads = []
    for agent in agents:
        broadcast = serialize_message(AgentMessage(MessageKind.PRIOR_BROADCAST, t, agent.agent_id, state.global_belief))
        uploads.append(deserialize_message(agent.handle(broadcast, init)))
    uploads.sort(key=lambda m: m.agent_id)
    locals_ = [m.belief for m in uploads]
    fused, fell_back = fuse_with_fallback(Rule(rule), state.global_belief, locals_)
    metrics = evaluate(spec, fused, test) if test is not None else {"mean_param_variance": float(np.mean(fused.variances()))}
    return RoundState(t, fused, locals_, metrics, fell_back, state.seed)


def run_rounds(
    shards: Sequence[LabeledShard],
    spec: MlpSpec,
    cfg: TrainConfig,
    rule: Rule | str,
    rounds: int,
    q0: float,
    seed: int,
    test: LabeledShard | None = None,
) -> list[RoundState]:
    """Trajectory of ``rounds`` rounds starting from the seeded round-0 prior."""
    state = initial_state(spec, q0, seed, test)
    states = []
    for _ in range(rounds):
        state = run_round(state, shards, spec, cfg, rule, test)
        states.append(state)
    return states
