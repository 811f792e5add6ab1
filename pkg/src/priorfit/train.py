"""Prior-fitting loop.

Each optimizer step draws one batch geometry (row count and split position),
generates one episode per pool slot and accumulation micro-step, runs the
batched forward, and backpropagates the mean per-episode NLL once. Model
parameters take an Adam descent step; adversarial agents take a sign-flipped
SGD step on the very same gradients, then the reset schedule is serviced.

All randomness is re-derived from (run_seed, namespace, step, ...) so a run
is bit-reproducible and resuming from a checkpoint continues the exact
stream an uninterrupted run would have produced.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .agents import NLL_EPSILON, AgentConfig, AgentPool, ascend_or_reset
from .model import Episode, Model, ModelConfig
from .prior import (CLASSIFICATION, REGRESSION, Dataset, GeneratorHyperSpace,
                    generate_dataset, sample_generator)
from .seeding import (NS_BATCH_META, NS_EPISODE, NS_GATES, NS_MODEL_INIT,
                      NS_ORDINARY_GEN, derive_rng, derive_seed)

log = logging.getLogger(__name__)

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TrainConfig:
    """Full-scale defaults; desk-scale runs override batch and budget."""

    model_lr: float = 1e-4
    datasets_per_step: int = 64      # pool slots, one episode each per micro-step
    accumulation_steps: int = 1
    total_datasets: int = 6_400_000
    rows: tuple[int, int] = (60, 160)
    seed: int = 0
    eval_every: int = 200
    dtype: str = "float64"

    def __post_init__(self):
        if self.datasets_per_step < 1 or self.accumulation_steps < 1:
            raise ValueError("effective batch size must be at least 1")
        if self.total_datasets < self.effective_batch:
            raise ValueError("dataset budget smaller than one effective batch")
        if self.rows[0] < 4 or self.rows[0] > self.rows[1]:
            raise ValueError("row-count range must be non-empty with at least 4 rows")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype '{self.dtype}'")

    @property
    def effective_batch(self) -> int:
        return self.datasets_per_step * self.accumulation_steps


class TrainLog:
    """Per-step records, optionally streamed to newline-delimited JSON."""

    def __init__(self, path: Optional[Path] = None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        self._fh = open(self.path, "a") if self.path else None

    def append(self, rec: dict) -> None:
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def nll_series(self) -> list[float]:
        return [r["nll"] for r in self.records if "nll" in r]

    @staticmethod
    def read(path) -> list[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# losses


def nll_classification(probs: Tensor, test_idx: np.ndarray,
                       valid: np.ndarray) -> Tensor:
    """Per-episode mean negative log-likelihood, (B,).

    Test rows whose label never appeared in the training context cannot be
    emitted by the mixture head; they contribute -log(epsilon).
    """
    p_true = T.take_along_last(probs, test_idx)
    mask = valid.astype(np.float64)
    p_eff = T.add(T.mul(p_true, Tensor(mask)), Tensor((1.0 - mask) * NLL_EPSILON))
    return T.neg(T.mean(T.log(p_eff), axis=-1))


def nll_regression(mu: Tensor, sigma: Tensor, y_test: Tensor) -> Tensor:
    """Per-episode mean Gaussian NLL, (B,)."""
    z = T.div(T.sub(y_test, mu), sigma)
    point = T.add(T.add(T.log(sigma), _HALF_LOG_2PI), T.mul(0.5, T.mul(z, z)))
    return T.mean(point, axis=-1)


def train_alphabet(ds: Dataset, l: int) -> np.ndarray:
    return np.unique(ds.y_labels[:l])


def nll(pred, episode: Episode) -> Tensor:
    """Episode-level NLL against a prediction aligned with its test rows.

    For classification, pred is an (n_test, C) probability tensor over the
    sorted labels observed in the training rows; for regression, a (mu,
    sigma) pair of (n_test,) tensors.
    """
    ds, l = episode.dataset, episode.l
    if ds.task == CLASSIFICATION:
        classes = train_alphabet(ds, l)
        lookup = {c: i for i, c in enumerate(classes)}
        test_raw = ds.y_labels[l:]
        idx = np.array([[lookup.get(c, 0) for c in test_raw]])
        valid = np.array([[c in lookup for c in test_raw]])
        probs = pred if pred.ndim == 3 else T.reshape(pred, (1,) + pred.shape)
        return T.reshape(nll_classification(probs, idx, valid), ())
    mu, sigma = pred
    mu = mu if mu.ndim == 2 else T.reshape(mu, (1, -1))
    sigma = sigma if sigma.ndim == 2 else T.reshape(sigma, (1, -1))
    y_test = T.reshape(ds.y_values, (1, -1))[:, l:]
    return T.reshape(nll_regression(mu, sigma, y_test), ())


def sample_split(n: int, rng: np.random.Generator) -> int:
    """Split position leaving at least 2 training and 2 test rows, uniform on
    [max(2, ceil(0.1 n)), n - 2]."""
    if n < 4:
        raise ValueError("episodes need at least 4 rows")
    lo = max(2, math.ceil(0.1 * n))
    return int(rng.integers(lo, n - 1))


# ---------------------------------------------------------------------------
# batched forward


def _pad_feature_block(x: Tensor, width: int) -> Tensor:
    n, d = x.shape
    if d > width:
        return x[:, :width]
    if d < width:
        return T.concat([x, Tensor(np.zeros((n, width - d)))], axis=1)
    return x


def _batch_width(model: Model, episodes: list[Episode]) -> int:
    if model.cfg.embed_mode == "dense":
        return model.cfg.feature_width
    return max(ep.dataset.d for ep in episodes)


def _forward_episode_losses(model: Model, episodes: list[Episode], l: int,
                            gate_rng: Optional[np.random.Generator]) -> Tensor:
    """Sum of per-episode mean NLLs for a same-geometry episode list."""
    cls = [ep for ep in episodes if ep.dataset.task == CLASSIFICATION]
    reg = [ep for ep in episodes if ep.dataset.task == REGRESSION]
    pieces = []
    if cls:
        width = _batch_width(model, cls)
        x = T.stack([_pad_feature_block(ep.dataset.X, width) for ep in cls])
        y = T.stack([ep.dataset.y_values for ep in cls])
        alphabets = [train_alphabet(ep.dataset, l) for ep in cls]
        n_classes = max(a.size for a in alphabets)
        n_test = cls[0].dataset.n - l
        train01 = np.zeros((len(cls), l), dtype=np.intp)
        test_idx = np.zeros((len(cls), n_test), dtype=np.intp)
        valid = np.zeros((len(cls), n_test), dtype=bool)
        for b, (ep, classes) in enumerate(zip(cls, alphabets)):
            lookup = {c: i for i, c in enumerate(classes)}
            train01[b] = [lookup[c] for c in ep.dataset.y_labels[:l]]
            for j, c in enumerate(ep.dataset.y_labels[l:]):
                valid[b, j] = c in lookup
                test_idx[b, j] = lookup.get(c, 0)
        probs = model.forward_classification(x, y, l, train01, n_classes, gate_rng)
        pieces.append(T.sum_(nll_classification(probs, test_idx, valid)))
    if reg:
        width = _batch_width(model, reg)
        x = T.stack([_pad_feature_block(ep.dataset.X, width) for ep in reg])
        y = T.stack([ep.dataset.y_values for ep in reg])
        mu, sigma = model.forward_regression(x, y, l)
        pieces.append(T.sum_(nll_regression(mu, sigma, y[:, l:])))
    total = pieces[0]
    for extra in pieces[1:]:
        total = T.add(total, extra)
    return total


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            if p.grad is None:
                # heads not exercised by this batch's task mix stay put
                continue
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m = b1 * m + (1.0 - b1) * p.grad
            v = b2 * v + (1.0 - b2) * p.grad * p.grad
            self.m[name], self.v[name] = m, v
            p.data = p.data - lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


# ---------------------------------------------------------------------------
# the step and the loop


def _all_params(model: Model, pool: Optional[AgentPool]) -> list[Tensor]:
    params = model.parameters()
    if pool is not None:
        for agent in pool.agents:
            params.extend(agent.parameters())
    return params


def _slot_episode(pool: Optional[AgentPool], space: GeneratorHyperSpace,
                  cfg: TrainConfig, step: int, idx: int, slot: int, n: int,
                  l: int) -> Episode:
    """Generate one episode for a slot; degenerate mechanisms (single-class
    response after all input resamples) get a deterministic redraw, with
    adversarial slots reset first."""
    adversarial = pool is not None and pool.is_adversarial(slot)
    for retry in range(4):
        ep_seed = derive_seed(cfg.seed, NS_EPISODE, step, idx, retry)
        try:
            if adversarial:
                ds = generate_dataset(pool.agents[slot].generator, n, ep_seed,
                                      soft=True)
            else:
                gen_seed = derive_seed(cfg.seed, NS_ORDINARY_GEN, step, idx, retry)
                ds = generate_dataset(sample_generator(space, gen_seed), n, ep_seed)
            return Episode(ds, l)
        except RuntimeError:
            if adversarial:
                pool.agents[slot].reset(reason="degenerate")
            continue
    raise RuntimeError(f"slot {slot}: no usable episode after redraws at step {step}")


def train_step(model: Model, pool: Optional[AgentPool], cfg: TrainConfig,
               space: GeneratorHyperSpace, step: int, adam: AdamState) -> dict:
    """One optimizer step over datasets_per_step x accumulation episodes."""
    m, k = cfg.datasets_per_step, cfg.accumulation_steps
    meta_rng = derive_rng(cfg.seed, NS_BATCH_META, step)
    n = int(meta_rng.integers(cfg.rows[0], cfg.rows[1] + 1))
    l = sample_split(n, meta_rng)
    gate_rng = derive_rng(cfg.seed, NS_GATES, step)

    T.zero_grads(_all_params(model, pool))
    step_nll = 0.0
    skipped = False
    try:
        for micro in range(k):
            episodes = []
            with T.Tape() as tape:
                for slot in range(m):
                    # flat episode index, so accumulation micro-steps consume
                    # the same streams one large batch would
                    idx = micro * m + slot
                    episodes.append(_slot_episode(pool, space, cfg, step, idx,
                                                  slot, n, l))
                loss_sum = _forward_episode_losses(model, episodes, l, gate_rng)
                loss = T.mul(loss_sum, 1.0 / (m * k))
                step_nll += float(loss.data)
                tape.backward(loss)
    except T.GradientNaN as err:
        skipped = True
        log.warning("step %d skipped: %s", step, err)
        T.zero_grads(_all_params(model, pool))
        if pool is not None:
            for agent in pool.agents:
                agent.reset(reason="nan-gradients")

    if not skipped:
        adam.step(model.params, cfg.model_lr)
        if pool is not None:
            for agent in pool.agents:
                ascend_or_reset(agent)
        T.zero_grads(_all_params(model, pool))

    resets = pool.service_resets() if pool is not None else 0
    return {"step": step, "nll": step_nll, "n": n, "l": l,
            "resets": resets, "skipped": skipped}


def _checkpoint_payload(cfg: TrainConfig, pool: Optional[AgentPool],
                        adam: AdamState, next_step: int):
    extra = {
        "next_step": next_step,
        "train_config": asdict(cfg),
        "adam": {"t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2,
                 "eps": adam.eps},
        "agents": [{"reset_count": a.reset_count,
                    "steps_since_reset": a.steps_since_reset}
                   for a in (pool.agents if pool else [])],
    }
    arrays = {}
    for name, m_arr in adam.m.items():
        arrays[f"adam/m/{name}"] = m_arr
        arrays[f"adam/v/{name}"] = adam.v[name]
    if pool is not None:
        for i, agent in enumerate(pool.agents):
            for j, w in enumerate(agent.generator.weights):
                arrays[f"agent/{i}/w/{j}"] = w.data
            for j, b in enumerate(agent.generator.biases):
                arrays[f"agent/{i}/b/{j}"] = b.data
    return extra, arrays


def _restore_training_state(extra: dict, aux: dict, cfg: TrainConfig,
                            pool: Optional[AgentPool]) -> tuple[AdamState, int]:
    stored = extra["train_config"]
    ours = asdict(cfg)
    ours["rows"], stored["rows"] = list(ours["rows"]), list(stored["rows"])
    if stored != ours:
        raise ValueError("checkpoint was written with a different train config")
    adam = AdamState(extra["adam"]["beta1"], extra["adam"]["beta2"],
                     extra["adam"]["eps"])
    adam.t = extra["adam"]["t"]
    for key, arr in aux.items():
        if key.startswith("adam/m/"):
            adam.m[key[len("adam/m/"):]] = arr.copy()
        elif key.startswith("adam/v/"):
            adam.v[key[len("adam/v/"):]] = arr.copy()
    if pool is not None:
        metas = extra["agents"]
        if len(metas) != len(pool.agents):
            raise ValueError("checkpoint agent count does not match the pool")
        for i, (agent, meta) in enumerate(zip(pool.agents, metas)):
            agent.reset_count = meta["reset_count"]
            agent.steps_since_reset = meta["steps_since_reset"]
            agent.generator = agent._sample()
            for j, w in enumerate(agent.generator.weights):
                w.data = aux[f"agent/{i}/w/{j}"].copy()
            for j, b in enumerate(agent.generator.biases):
                b.data = aux[f"agent/{i}/b/{j}"].copy()
    return adam, extra["next_step"]


def pretrain(cfg: TrainConfig, model_cfg: ModelConfig, space: GeneratorHyperSpace,
             agent_cfg: Optional[AgentConfig] = None,
             eval_hook: Optional[Callable[[Model, int], dict]] = None,
             checkpoint_path: Optional[Path] = None,
             log_path: Optional[Path] = None,
             resume_from: Optional[Path] = None,
             stop_after_steps: Optional[int] = None) -> tuple[Model, TrainLog]:
    """Run prior fitting until the dataset budget is exhausted.

    The returned model is the final-step model; checkpoints (when a path is
    given) are written at the evaluation cadence and at the end. Resuming
    from a checkpoint reproduces the NLL stream of an uninterrupted run.
    stop_after_steps interrupts the run early (checkpoint still written) so
    the same configured run can be continued later with resume_from.
    """
    prev_dtype = T.default_dtype()
    T.set_default_dtype(np.float32 if cfg.dtype == "float32" else np.float64)
    train_log = TrainLog(log_path)
    try:
        steps = math.ceil(cfg.total_datasets / cfg.effective_batch)
        pool = None
        if agent_cfg is not None:
            pool = AgentPool(cfg.datasets_per_step, space, cfg.seed, agent_cfg)
            if pool.n_adversarial == 0:
                pool = None
        if resume_from is not None:
            model, extra, aux = Model.load(resume_from)
            adam, start = _restore_training_state(extra, aux, cfg, pool)
        else:
            model = Model(model_cfg, seed=derive_seed(cfg.seed, NS_MODEL_INIT))
            adam = AdamState()
            start = 0

        def write_checkpoint(next_step: int) -> None:
            if checkpoint_path is None:
                return
            extra, arrays = _checkpoint_payload(cfg, pool, adam, next_step)
            try:
                model.save(checkpoint_path, extra=extra, arrays=arrays)
            except OSError:
                train_log.close()
                raise

        stop_at = steps if stop_after_steps is None else min(steps, start + stop_after_steps)
        for step in range(start, stop_at):
            rec = train_step(model, pool, cfg, space, step, adam)
            train_log.append(rec)
            due = (step + 1) % cfg.eval_every == 0 or step == stop_at - 1
            if due:
                if eval_hook is not None:
                    metrics = eval_hook(model, step)
                    train_log.append({"step": step, "eval": metrics})
                write_checkpoint(step + 1)
        return model, train_log
    finally:
        T.set_default_dtype(prev_dtype)
        train_log.close()
