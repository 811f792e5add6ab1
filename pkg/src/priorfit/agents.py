"""Adversarial data agents: generators whose MLP weights climb the
meta-learner's prediction loss.

An agent wraps a generator instance with grad-enabled weights and a positive
soft-discretization temperature so episode generation stays connected to the
weights on the tape. The training loop backpropagates the episode loss once;
the model descends those gradients while the agent ascends them (plain SGD
with decoupled weight decay). Every reset_period optimizer steps the agent's
MLP and all its random factors (feature count, class count, discretizer
draws, task kind) are re-sampled, which keeps the generator from settling
into a stalemate with the model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .model import Episode, Model
from .prior import CLASSIFICATION, GeneratorHyperSpace, sample_generator
from .seeding import NS_AGENT_RESET, derive_seed

log = logging.getLogger(__name__)

NLL_EPSILON = 1e-9  # probability floor for test labels absent from the context


class AgentError(ValueError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    """Agent-pool block of the run configuration."""

    fraction: float = 0.125
    lr: float = 0.1
    weight_decay: float = 1e-5
    temperature: float = 0.01
    reset_period: int = 2000

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("adversarial fraction must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("agent temperature must be positive for gradient flow")
        if self.reset_period < 1:
            raise ValueError("reset_period must be at least 1")


class AgentState:
    """One adversarial slot: its live generator plus the reset clock."""

    def __init__(self, cfg: AgentConfig, space: GeneratorHyperSpace,
                 run_seed: int, slot: int):
        self.cfg = cfg
        self.space = space
        self.run_seed = run_seed
        self.slot = slot
        self.reset_count = 0
        self.steps_since_reset = 0
        self.generator = self._sample()

    def _sample(self):
        seed = derive_seed(self.run_seed, NS_AGENT_RESET, self.slot, self.reset_count)
        g = sample_generator(self.space, seed)
        g.set_requires_grad(True)
        g.set_temperature(self.cfg.temperature)
        return g

    def parameters(self) -> list[Tensor]:
        return self.generator.parameters()

    def reset(self, reason: str = "schedule") -> None:
        self.reset_count += 1
        self.steps_since_reset = 0
        self.generator = self._sample()
        log.info("agent %d reset (%s), generation %d", self.slot, reason, self.reset_count)

    def maybe_reset(self) -> bool:
        """Advance the clock by one training step; re-sample when it hits the
        period. Returns True when a reset happened."""
        self.steps_since_reset += 1
        if self.steps_since_reset >= self.cfg.reset_period:
            self.reset()
            return True
        return False


class AgentPool:
    """m generator slots with a fixed adversarial prefix.

    round(fraction * m) slots are adversarial and stay adversarial for the
    whole run; the rest draw a fresh ordinary generator every episode.
    """

    def __init__(self, m: int, space: GeneratorHyperSpace, run_seed: int,
                 agent_cfg: Optional[AgentConfig] = None):
        if m < 1:
            raise ValueError("pool needs at least one slot")
        self.m = m
        self.space = space
        self.run_seed = run_seed
        self.agent_cfg = agent_cfg
        n_adv = int(round(agent_cfg.fraction * m)) if agent_cfg else 0
        self.agents = [AgentState(agent_cfg, space, run_seed, slot)
                       for slot in range(n_adv)]

    @property
    def n_adversarial(self) -> int:
        return len(self.agents)

    def is_adversarial(self, slot: int) -> bool:
        return slot < len(self.agents)

    def service_resets(self) -> int:
        return sum(1 for a in self.agents if a.maybe_reset())


def _pad_to_width(x: Tensor, width: int) -> Tensor:
    n, d = x.shape
    if d >= width:
        return x[:, :width]
    return T.concat([x, Tensor(np.zeros((n, width - d)))], axis=1)


def agent_loss(agent: AgentState, model: Model, episode: Episode,
               gate_rng: Optional[np.random.Generator] = None) -> T.Tensor:
    """Mean log-likelihood of the model on the episode's test rows, the
    quantity whose gradients the agent climbs (the negated per-point NLL).

    The episode must have been generated by this agent on the live tape;
    a gradient-disconnected episode (hard discretization, or generation
    outside a tape) is refused.
    """
    ds = episode.dataset
    if not ds.X.requires_grad:
        raise AgentError("episode is not gradient-connected to the agent "
                         "(generate with soft discretization on an active tape)")
    l, n = episode.l, ds.n
    x = T.reshape(_pad_to_width(ds.X, model.cfg.feature_width), (1, n, -1))
    y = T.reshape(ds.y_values, (1, n))
    if ds.task == CLASSIFICATION:
        classes = np.unique(ds.y_labels[:l])
        lookup = {c: i for i, c in enumerate(classes)}
        train01 = np.array([[lookup[c] for c in ds.y_labels[:l]]])
        test_raw = ds.y_labels[l:]
        valid = np.array([c in lookup for c in test_raw])
        test01 = np.array([[lookup.get(c, 0) for c in test_raw]])
        probs = model.forward_classification(x, y, l, train01, len(classes), gate_rng)
        p_true = T.take_along_last(probs, test01)
        mask = Tensor(valid.astype(np.float64)[None, :])
        p_eff = T.add(T.mul(p_true, mask), T.mul(Tensor(1.0 - mask.data), NLL_EPSILON))
        return T.mean(T.log(p_eff))
    mu, sigma = model.forward_regression(x, y, l)
    y_test = T.reshape(ds.y_values, (1, n))[:, l:]
    z = T.div(T.sub(y_test, mu), sigma)
    point_ll = T.neg(T.add(T.add(T.log(sigma), 0.5 * np.log(2.0 * np.pi)),
                           T.mul(0.5, T.mul(z, z))))
    return T.mean(point_ll)


def ascend_or_reset(agent: AgentState) -> bool:
    """Climb the populated gradients, or reset the agent when they are
    missing or non-finite. Returns True when the ascent step was taken."""
    grads_ok = all(p.grad is not None and np.isfinite(p.grad).all()
                   for p in agent.parameters())
    if grads_ok:
        T.ascend_step(agent.parameters(), agent.cfg.lr, agent.cfg.weight_decay)
        return True
    log.warning("agent %d: non-finite or missing gradients", agent.slot)
    agent.reset(reason="nan-gradients")
    return False


def joint_update(agent: Optional[AgentState], model: Model, lr_model: float) -> None:
    """Apply the coherent single-iteration update from one completed backward
    pass: descent on the model, sign-flipped ascent with decoupled weight
    decay on the agent. Model parameters outside the episode's graph (the
    unused heads) carry no gradient and stay put."""
    if agent is not None:
        ascend_or_reset(agent)
    touched = [p for p in model.parameters() if p.grad is not None]
    if not touched:
        raise T.MissingGradient("joint_update: model received no gradients")
    T.descend_step(touched, lr_model)
