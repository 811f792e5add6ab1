"""The meta-learner: feature and label embedding, test-masked transformer
blocks, and the prediction heads.

Every token attends only to training tokens, so test rows see the training
context but never each other. Classification goes through the scatter-sum
mixture head by default, which has no parameter tied to a class count: each
test row queries the training rows for softmax weights, sparsifies them with
near-binary Concrete gates, scatter-sums the surviving weight by training
label, and renormalizes. A conventional dense head (capped at a fixed class
budget) is kept for ablation; regression uses a Gaussian (mu, sigma) head.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .prior import Dataset

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-4
_GATE_MASS_FLOOR = 1e-9
CHECKPOINT_VERSION = 1


def _scale_rows(a: Tensor, s, inverse: bool = False) -> Tensor:
    """Row-wise scale of a (..., C) tensor by s of shape (...): the last axis
    is moved to the front so the engine's leading-dim broadcast applies."""
    moved = T.permute(a, (a.ndim - 1,) + tuple(range(a.ndim - 1)))
    scaled = T.div(moved, s) if inverse else T.mul(moved, s)
    return T.permute(scaled, tuple(range(1, a.ndim)) + (0,))


@dataclass(frozen=True)
class ModelConfig:
    """Full-scale defaults; desk-scale runs shrink every dimension."""

    d_model: int = 512
    n_blocks: int = 12
    n_heads: int = 4
    d_ff: int = 1024
    feature_width: int = 100
    embed_mode: str = "dense"      # dense | patch
    head: str = "mixture"          # mixture | dense (classification head choice)
    gate_temperature: float = 0.1
    max_classes: int = 10          # dense-head cap only

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.feature_width < 1:
            raise ValueError("feature_width must be at least 1")
        if self.embed_mode not in ("dense", "patch"):
            raise ValueError(f"unknown embed_mode '{self.embed_mode}'")
        if self.head not in ("mixture", "dense"):
            raise ValueError(f"unknown head '{self.head}'")
        if self.gate_temperature <= 0:
            raise ValueError("gate_temperature must be positive")


@dataclass
class Episode:
    """One dataset with its train/test split position."""

    dataset: Dataset
    l: int

    def __post_init__(self):
        if not 1 <= self.l < self.dataset.n:
            raise ValueError(f"split {self.l} out of range for n={self.dataset.n}")


@dataclass
class Prediction:
    """Inference output: a row-stochastic matrix over the training labels, or
    per-row Gaussian parameters."""

    task: str
    probs: Optional[np.ndarray] = None     # (n_test, C)
    classes: Optional[np.ndarray] = None   # original label of each column
    mu: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    member_variance: Optional[float] = None  # set by ensembling


class Model:
    """Parameter registry plus the forward passes."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameters -------------------------------------------------------

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr, requires_grad=True)

    def _init_block(self, rng, prefix: str) -> None:
        dm, dff = self.cfg.d_model, self.cfg.d_ff
        self._add(f"{prefix}/ln1/gain", np.ones(dm))
        self._add(f"{prefix}/ln1/bias", np.zeros(dm))
        for proj in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}/attn/{proj}", rng.standard_normal((dm, dm)) / np.sqrt(dm))
        self._add(f"{prefix}/ln2/gain", np.ones(dm))
        self._add(f"{prefix}/ln2/bias", np.zeros(dm))
        self._add(f"{prefix}/ff/w1", rng.standard_normal((dm, dff)) / np.sqrt(dm))
        self._add(f"{prefix}/ff/b1", np.zeros(dff))
        self._add(f"{prefix}/ff/w2", rng.standard_normal((dff, dm)) / np.sqrt(dff))
        self._add(f"{prefix}/ff/b2", np.zeros(dm))

    def _init_params(self, rng) -> None:
        cfg = self.cfg
        dm = cfg.d_model
        self._add("embed/w", rng.standard_normal((cfg.feature_width, dm))
                  / np.sqrt(cfg.feature_width))
        self._add("embed/b", np.zeros(dm))
        self._add("label/w", rng.standard_normal((1, dm)))
        self._add("label/b", np.zeros(dm))
        if cfg.embed_mode == "patch":
            self._init_block(rng, "patch_block")
        for i in range(cfg.n_blocks):
            self._init_block(rng, f"blocks/{i}")
        self._add("final_ln/gain", np.ones(dm))
        self._add("final_ln/bias", np.zeros(dm))
        for name in ("weight_q", "weight_k", "gate_q", "gate_k"):
            self._add(f"mixture/{name}", rng.standard_normal((dm, dm)) / np.sqrt(dm))
        self._add("gauss/w", rng.standard_normal((dm, 2)) / np.sqrt(dm))
        self._add("gauss/b", np.zeros(2))
        self._add("dense_head/w", rng.standard_normal((dm, cfg.max_classes)) / np.sqrt(dm))
        self._add("dense_head/b", np.zeros(cfg.max_classes))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def checksum(self) -> int:
        crc = 0
        for name in self.params:
            t = self.params[name]
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(t.data).tobytes(), crc)
        return crc

    # -- embedding --------------------------------------------------------

    def _attention(self, x: Tensor, keys: Tensor, prefix: str) -> Tensor:
        """Multi-head attention of every token in x over the given key rows."""
        cfg = self.cfg
        dh = cfg.d_model // cfg.n_heads
        p = self.params
        B, n = x.shape[0], x.shape[1]
        m = keys.shape[1]

        def split(t, length):
            t = T.reshape(t, (B, length, cfg.n_heads, dh))
            return T.permute(t, (0, 2, 1, 3))

        q = split(T.matmul(x, p[f"{prefix}/attn/wq"]), n)
        k = split(T.matmul(keys, p[f"{prefix}/attn/wk"]), m)
        v = split(T.matmul(keys, p[f"{prefix}/attn/wv"]), m)
        scores = T.matmul(q, T.swap_last(k)) * (1.0 / np.sqrt(dh))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        ctx = T.reshape(T.permute(ctx, (0, 2, 1, 3)), (B, n, cfg.d_model))
        return T.matmul(ctx, p[f"{prefix}/attn/wo"])

    def _block(self, x: Tensor, key_count: Optional[int], prefix: str) -> Tensor:
        """Pre-norm transformer block; keys restricted to the first key_count
        rows when given (test masking), full self-attention otherwise."""
        p = self.params
        h = T.layer_norm(x, p[f"{prefix}/ln1/gain"], p[f"{prefix}/ln1/bias"])
        keys = h if key_count is None else h[:, :key_count]
        x = T.add(x, self._attention(h, keys, prefix))
        h = T.layer_norm(x, p[f"{prefix}/ln2/gain"], p[f"{prefix}/ln2/bias"])
        h = T.matmul(T.gelu(T.add(T.matmul(h, p[f"{prefix}/ff/w1"]), p[f"{prefix}/ff/b1"])),
                     p[f"{prefix}/ff/w2"])
        return T.add(x, T.add(h, p[f"{prefix}/ff/b2"]))

    def embed_features(self, x: Tensor) -> Tensor:
        """Map raw feature rows (B, n, d) onto (B, n, d_model)."""
        cfg = self.cfg
        d = x.shape[-1]
        if d == 0:
            raise ValueError("cannot embed rows with zero features")
        if cfg.embed_mode == "dense":
            if d > cfg.feature_width:
                x = x[:, :, :cfg.feature_width]
            elif d < cfg.feature_width:
                pad = np.zeros(x.shape[:-1] + (cfg.feature_width - d,))
                x = T.concat([x, Tensor(pad)], axis=-1)
            return T.add(T.matmul(x, self.params["embed/w"]), self.params["embed/b"])
        return self._patch_embed(x)

    def _patch_embed(self, x: Tensor) -> Tensor:
        """Split features into patches, embed each with the shared map, run one
        attention block over the patches, and average-pool.

        Pooling is over unordered patch embeddings; no positional encoding."""
        cfg = self.cfg
        B, n, d = x.shape
        n_patch = -(-d // cfg.feature_width)
        padded = n_patch * cfg.feature_width
        if padded > d:
            pad = np.zeros((B, n, padded - d))
            x = T.concat([x, Tensor(pad)], axis=-1)
        x = T.reshape(x, (B * n, n_patch, cfg.feature_width))
        e = T.add(T.matmul(x, self.params["embed/w"]), self.params["embed/b"])
        e = self._block(e, None, "patch_block")
        pooled = T.mean(e, axis=1)
        return T.reshape(pooled, (B, n, cfg.d_model))

    def embed_episode(self, x: Tensor, y_values: Tensor, l: int) -> Tensor:
        """Build the token sequence: training rows carry their label embedding,
        test rows carry features only."""
        feats = self.embed_features(x)
        B = x.shape[0]
        y_train = T.reshape(y_values[:, :l], (B, l, 1))
        label_emb = T.add(T.matmul(y_train, self.params["label/w"]), self.params["label/b"])
        h_train = T.add(feats[:, :l], label_emb)
        return T.concat([h_train, feats[:, l:]], axis=1)

    # -- trunk and heads --------------------------------------------------

    def transformer(self, tokens: Tensor, l: int) -> Tensor:
        """Contextualize tokens; every token attends to the l training tokens only."""
        if l < 1:
            raise ValueError("masked transformer needs a non-empty training partition")
        h = tokens
        for i in range(self.cfg.n_blocks):
            h = self._block(h, l, f"blocks/{i}")
        return T.layer_norm(h, self.params["final_ln/gain"], self.params["final_ln/bias"])

    def mixture_head(self, ctx: Tensor, l: int, train_labels: np.ndarray,
                     n_classes: int, gate_rng: Optional[np.random.Generator] = None
                     ) -> Tensor:
        """Class probabilities over the n_classes observed training labels.

        train_labels is (B, l) with entries in 0..n_classes-1. With a generator
        supplied, gates are sampled from the binary Concrete relaxation at the
        configured temperature; otherwise gating is the deterministic sigmoid.
        Rows whose gated mass underflows fall back to the ungated weights.
        """
        p = self.params
        dm = self.cfg.d_model
        q_t, k_t = ctx[:, l:], ctx[:, :l]
        scale = 1.0 / np.sqrt(dm)
        w_logits = T.matmul(T.matmul(q_t, p["mixture/weight_q"]),
                            T.swap_last(T.matmul(k_t, p["mixture/weight_k"]))) * scale
        probs = T.softmax(w_logits, axis=-1)
        g_logits = T.matmul(T.matmul(q_t, p["mixture/gate_q"]),
                            T.swap_last(T.matmul(k_t, p["mixture/gate_k"]))) * scale
        if gate_rng is None:
            gates = T.sigmoid(g_logits)
        else:
            u = gate_rng.uniform(1e-7, 1.0 - 1e-7, size=g_logits.shape)
            noise = np.log(u) - np.log1p(-u)
            gates = T.sigmoid(T.add(g_logits, Tensor(noise))
                              * (1.0 / self.cfg.gate_temperature))
        labels = np.asarray(train_labels, dtype=np.intp)
        mass = T.scatter_add(T.mul(probs, gates), labels, n_classes)
        total = T.sum_(mass, axis=-1)
        starved = total.data < _GATE_MASS_FLOOR
        if starved.any():
            log.warning("mixture head: %d test rows with fully closed gates, "
                        "falling back to ungated weights", int(starved.sum()))
            ungated = T.scatter_add(probs, labels, n_classes)
            mass = T.add(_scale_rows(mass, Tensor((~starved).astype(np.float64))),
                         _scale_rows(ungated, Tensor(starved.astype(np.float64))))
            total = T.sum_(mass, axis=-1)
        return _scale_rows(mass, total, inverse=True)

    def dense_head(self, ctx: Tensor, l: int, n_classes: int) -> Tensor:
        """Ablation head: fixed-width projection, softmax over the first
        n_classes entries. Refuses class counts beyond its cap."""
        if n_classes > self.cfg.max_classes:
            raise ValueError(
                f"dense head capped at {self.cfg.max_classes} classes, "
                f"episode has {n_classes}")
        logits = T.add(T.matmul(ctx[:, l:], self.params["dense_head/w"]),
                       self.params["dense_head/b"])
        return T.softmax(logits[:, :, :n_classes], axis=-1)

    def gaussian_head(self, ctx: Tensor, l: int) -> tuple[Tensor, Tensor]:
        out = T.add(T.matmul(ctx[:, l:], self.params["gauss/w"]), self.params["gauss/b"])
        mu = out[:, :, 0]
        sigma = T.add(T.softplus(out[:, :, 1]), SIGMA_FLOOR)
        return mu, sigma

    # -- full passes ------------------------------------------------------

    def forward_classification(self, x: Tensor, y_values: Tensor, l: int,
                               train_labels: np.ndarray, n_classes: int,
                               gate_rng: Optional[np.random.Generator] = None
                               ) -> Tensor:
        ctx = self.transformer(self.embed_episode(x, y_values, l), l)
        if self.cfg.head == "dense":
            return self.dense_head(ctx, l, n_classes)
        return self.mixture_head(ctx, l, train_labels, n_classes, gate_rng)

    def forward_regression(self, x: Tensor, y_values: Tensor, l: int
                           ) -> tuple[Tensor, Tensor]:
        ctx = self.transformer(self.embed_episode(x, y_values, l), l)
        return self.gaussian_head(ctx, l)

    # -- checkpointing ----------------------------------------------------

    def save(self, path, extra: Optional[dict] = None,
             arrays: Optional[dict[str, np.ndarray]] = None) -> None:
        """Write a versioned checkpoint: header, then parameters in registry
        order; round trip is bit-exact."""
        header = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "head": self.cfg.head,
            "seed": self.seed,
            "param_order": list(self.params),
            "extra": extra or {},
        }
        payload = {"__header__": np.frombuffer(
            json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
        for name, t in self.params.items():
            payload["param::" + name] = t.data
        for name, arr in (arrays or {}).items():
            payload["aux::" + name] = arr
        with open(path, "wb") as fh:
            np.savez(fh, **payload)

    @classmethod
    def load(cls, path) -> tuple["Model", dict, dict[str, np.ndarray]]:
        with np.load(path) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            if header["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header['version']}")
            model = cls(ModelConfig(**header["config"]), seed=header["seed"])
            for name in header["param_order"]:
                arr = z["param::" + name]
                if model.params[name].data.shape != arr.shape:
                    raise ValueError(f"checkpoint parameter '{name}' has shape "
                                     f"{arr.shape}, expected {model.params[name].shape}")
                model.params[name].data = arr.copy()
            aux = {k[len("aux::"):]: z[k].copy() for k in z.files if k.startswith("aux::")}
        return model, header["extra"], aux
