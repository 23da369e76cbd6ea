"""CTRN network: representation transform, class-temporal blocks, G-classifier.

Feature maps are laid out as ``B x T x C x D2`` (batch, time, class,
channel). The single-video functions below also accept ``T x C x D2`` and
add the batch axis themselves.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as tn
from .tensor import Parameter, Tensor


@dataclass
class CtrnConfig:
    D1: int = 1024
    D2: int = 64
    C: int = 157
    L: int = 5
    K: int = 9
    padding: int | None = None
    dropout_p: float = 0.3
    attention_bottleneck: int | None = None
    alpha: float = 1.2
    theta: float = 0.05
    reweight_p: float = 0.2
    use_rtm_mlp: bool = True
    use_cgcn: bool = True
    use_tcn: bool = True
    use_gclassifier: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    head_init_std: float = 0.01
    dtype: str = "float64"

    def __post_init__(self):
        if self.padding is None:
            self.padding = (self.K - 1) // 2
        if self.attention_bottleneck is None:
            self.attention_bottleneck = max(1, self.D2 // 4)
        self.validate()

    @property
    def beta(self) -> float:
        return self.D1 / self.D2

    def validate(self) -> None:
        for name in ("D1", "D2", "C", "L", "K", "attention_bottleneck"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.K % 2 == 0:
            raise ValueError(f"kernel size K must be odd, got {self.K}")
        if self.padding != (self.K - 1) // 2:
            raise ValueError(f"padding must be (K-1)/2 = {(self.K - 1) // 2}, got {self.padding}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if not 0.0 < self.reweight_p < 1.0:
            raise ValueError(f"reweight_p must lie in (0, 1), got {self.reweight_p}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CtrnConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class HeadOutputs(NamedTuple):
    """Pre-sigmoid scores of the two G-classifier applications (B x T x C)."""
    ctm_logits: Tensor
    rtm_logits: Tensor


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    x = tn.as_tensor(x)
    if x.ndim == 3:
        return tn.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise tn.ShapeError(f"expected a T x C x D or B x T x C x D map, got {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeezed: bool) -> Tensor:
    return tn.reshape(x, x.shape[1:]) if squeezed else x


# ----------------------------------------------------------------- operations

def rtm_forward(X, weight: Tensor, bias: Tensor, C: int, dropout_p: float = 0.0,
                training: bool = False, rng=None, mask=None) -> Tensor:
    """Per-class projection of ``T x D1`` (or ``B x T x D1``) features.

    ``weight`` is ``D1 x C x D2`` with ``bias`` ``C x D2`` for per-class maps,
    or ``D1 x D2`` with bias ``D2`` for the shared-map ablation.
    """
    X = tn.as_tensor(X)
    squeezed = X.ndim == 2
    if squeezed:
        X = tn.reshape(X, (1,) + X.shape)
    B, T, D1 = X.shape
    if weight.shape[0] != D1:
        raise tn.ShapeError(f"rtm: input width {D1} does not match weight {weight.shape}")
    flat = tn.reshape(X, (B * T, D1))
    if weight.ndim == 3:
        _, c, D2 = weight.shape
        if c != C:
            raise tn.ShapeError(f"rtm: weight has {c} classes, expected {C}")
        h = tn.matmul(flat, tn.reshape(weight, (D1, C * D2)))
        h = tn.reshape(h, (B, T, C, D2))
        h = tn.bias_add(h, bias)
    else:
        D2 = weight.shape[1]
        h = tn.bias_add(tn.matmul(flat, weight), bias)
        h = tn.repeat_new_axis(tn.reshape(h, (B, T, D2)), C, axis=2)
    h = tn.relu(h)
    h = tn.dropout(h, dropout_p, training, rng)
    h = tn.apply_mask(h, mask)
    return tn.reshape(h, h.shape[1:]) if squeezed else h


def cgcn_attention_adjacency(Xc_in, W1: Tensor, W2: Tensor) -> Tensor:
    """Input-conditioned C x C attention, rows normalised by softmax.

    Both embeddings are 1x1 projections to the bottleneck width; the product
    contracts over time and bottleneck channels. Returns ``B x C x C`` for a
    batched map and ``C x C`` for a single video.
    """
    X, squeezed = _batched(Xc_in)
    B, T, C, D = X.shape
    e1 = tn.matmul(X, W1)  # B T C d
    e2 = tn.matmul(X, W2)
    d = e1.shape[-1]
    left = tn.reshape(tn.transpose(e1, (0, 2, 1, 3)), (B, C, T * d))
    right = tn.reshape(tn.transpose(e2, (0, 1, 3, 2)), (B, T * d, C))
    att = tn.softmax(tn.matmul(left, right), axis=-1)
    return tn.reshape(att, (C, C)) if squeezed else att


def cgcn_forward(Xc_in, A: Tensor, W3: Tensor) -> Tensor:
    """Message passing ``A @ X[t] @ W3`` at every time step with one A.

    ``A`` is ``C x C`` or per-video ``B x C x C``.
    """
    X, squeezed = _batched(Xc_in)
    A = tn.as_tensor(A)
    if A.shape[-1] != X.shape[2] or A.shape[-2] != X.shape[2]:
        raise tn.ShapeError(f"cgcn: adjacency {A.shape} does not match {X.shape[2]} classes")
    if A.ndim == 3:
        A = tn.reshape(A, (A.shape[0], 1) + A.shape[1:])
    out = tn.matmul(A, tn.matmul(X, W3))
    return _unbatch(out, squeezed)


def tcn_forward(X, weight: Tensor, bias: Tensor | None, K: int, padding: int) -> Tensor:
    """Temporal convolution per class with weights shared across classes."""
    if K % 2 == 0:
        raise ValueError(f"kernel size K must be odd, got {K}")
    Xb, squeezed = _batched(X)
    B, T, C, D = Xb.shape
    if weight.shape[2] != K:
        raise tn.ShapeError(f"tcn: weight {weight.shape} does not have kernel size {K}")
    folded = tn.reshape(tn.transpose(Xb, (0, 2, 3, 1)), (B * C, D, T))
    y = tn.conv1d_same(folded, weight, bias, padding)
    Dout = weight.shape[0]
    out = tn.transpose(tn.reshape(y, (B, C, Dout, T)), (0, 3, 1, 2))
    return _unbatch(out, squeezed)


def gclassifier_logits(Xl, A_S, W_S: Tensor, b_S: Tensor | None) -> Tensor:
    """Pre-sigmoid scores ``A_S @ X[t] @ W_S (+ b)``, shape ``(B x) T x C``."""
    X, squeezed = _batched(Xl)
    C = X.shape[2]
    A_S = tn.as_tensor(A_S)
    if A_S.shape != (C, C):
        raise tn.ShapeError(f"gclassifier: A_S {A_S.shape} does not match {C} classes")
    z = tn.matmul(A_S, tn.matmul(X, W_S))  # B T C 1
    z = tn.reshape(z, X.shape[:3])
    if b_S is not None:
        z = tn.add(z, b_S)
    return _unbatch(z, squeezed)


def gclassifier_forward(Xl, A_S, W_S: Tensor, b_S: Tensor | None = None) -> Tensor:
    return tn.sigmoid(gclassifier_logits(Xl, A_S, W_S, b_S))


def total_loss(S_ctm: Tensor, S_rtm: Tensor, Y, alpha: float, mask=None) -> Tensor:
    """``bce(S_ctm) + alpha * bce(S_rtm)`` over unmasked snippets."""
    loss = tn.bce(S_ctm, Y, mask)
    if alpha == 0:
        return loss
    return tn.add(loss, tn.scale(tn.bce(S_rtm, Y, mask), alpha))


def fuse_logits(logits_a, logits_b) -> np.ndarray:
    """Two-stream fusion: mean of the two streams' logits, returned as logits."""
    a, b = np.asarray(logits_a, dtype=float), np.asarray(logits_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"cannot fuse scores of shapes {a.shape} and {b.shape}")
    return (a + b) / 2.0


# ---------------------------------------------------------------------- model

def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class CTRN:
    """Parameters, buffers and the fixed G-classifier adjacency of one model."""

    def __init__(self, config: CtrnConfig, seed: int = 0, A_S: np.ndarray | None = None):
        self.config = config
        cfg = config
        dt = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng(rng.integers(2**63))
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}

        def add(name, data):
            self.params[name] = Parameter(data, name, dtype=dt)

        D1, D2, C, d = cfg.D1, cfg.D2, cfg.C, cfg.attention_bottleneck
        if cfg.use_rtm_mlp:
            add("rtm.weight", _uniform(rng, D1, (D1, C, D2), dt))
            add("rtm.bias", _uniform(rng, D1, (C, D2), dt))
        else:
            add("rtm.weight", _uniform(rng, D1, (D1, D2), dt))
            add("rtm.bias", _uniform(rng, D1, (D2,), dt))
        for i in range(cfg.L):
            p = f"block{i}"
            if cfg.use_cgcn:
                add(f"{p}.cgcn.adjacency", np.full((C, C), 1.0 / C))
                add(f"{p}.cgcn.W1", _uniform(rng, D2, (D2, d), dt))
                add(f"{p}.cgcn.W2", _uniform(rng, D2, (D2, d), dt))
                add(f"{p}.cgcn.W3", _uniform(rng, D2, (D2, D2), dt))
                add(f"{p}.bn1.gamma", np.ones(D2))
                add(f"{p}.bn1.beta", np.zeros(D2))
                self.buffers[f"{p}.bn1.running_mean"] = np.zeros(D2, dtype=dt)
                self.buffers[f"{p}.bn1.running_var"] = np.ones(D2, dtype=dt)
            if cfg.use_tcn:
                add(f"{p}.tcn.weight", _uniform(rng, D2 * cfg.K, (D2, D2, cfg.K), dt))
                add(f"{p}.tcn.bias", _uniform(rng, D2 * cfg.K, (D2,), dt))
                add(f"{p}.bn2.gamma", np.ones(D2))
                add(f"{p}.bn2.beta", np.zeros(D2))
                self.buffers[f"{p}.bn2.running_mean"] = np.zeros(D2, dtype=dt)
                self.buffers[f"{p}.bn2.running_var"] = np.ones(D2, dtype=dt)
        add("head.W_S", rng.normal(0.0, cfg.head_init_std, size=(D2, 1)))
        add("head.bias", np.zeros(1))
        if A_S is None:
            A_S = np.eye(C)
        self.set_cooccurrence(A_S)

    # -- plumbing
    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        tn.zero_grad(self.parameters())

    def set_cooccurrence(self, A_S: np.ndarray) -> None:
        A_S = np.asarray(A_S, dtype=np.dtype(self.config.dtype))
        C = self.config.C
        if A_S.shape != (C, C):
            raise ValueError(f"A_S shape {A_S.shape} does not match C={C}")
        self.A_S = A_S.copy()

    def classifier_adjacency(self) -> np.ndarray:
        if self.config.use_gclassifier:
            return self.A_S
        return np.eye(self.config.C, dtype=self.A_S.dtype)

    def seed_dropout(self, seed: int) -> None:
        self.dropout_rng = np.random.default_rng(seed)

    # -- forward pieces
    def rtm(self, X, training=False, mask=None) -> Tensor:
        cfg = self.config
        return rtm_forward(X, self.params["rtm.weight"], self.params["rtm.bias"], cfg.C,
                           cfg.dropout_p, training, self.dropout_rng, mask)

    def adjacency(self, i: int, X) -> Tensor:
        """Superimposed adjacency of block ``i`` for input map ``X``."""
        p = self.params
        att = cgcn_attention_adjacency(X, p[f"block{i}.cgcn.W1"], p[f"block{i}.cgcn.W2"])
        base = p[f"block{i}.cgcn.adjacency"]
        if att.ndim == 3:
            base = tn.repeat_new_axis(base, att.shape[0], axis=0)
        return tn.add(base, att)

    def _bn(self, name: str, x: Tensor, mask, training: bool) -> Tensor:
        cfg = self.config
        running = (self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"])
        return tn.batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                             mask=mask, eps=cfg.bn_eps, running=running, training=training,
                             momentum=cfg.bn_momentum)

    def block(self, i: int, X: Tensor, training=False, mask=None) -> Tensor:
        """One CTM block: x + relu(bn(cgcn(x))), then y + relu(bn(tcn(y)))."""
        cfg = self.config
        p = self.params
        if cfg.use_cgcn:
            h = cgcn_forward(X, self.adjacency(i, X), p[f"block{i}.cgcn.W3"])
            h = tn.relu(self._bn(f"block{i}.bn1", h, mask, training))
            X = tn.add(X, h)
        if cfg.use_tcn:
            h = tcn_forward(X, p[f"block{i}.tcn.weight"], p[f"block{i}.tcn.bias"], cfg.K, cfg.padding)
            h = tn.relu(self._bn(f"block{i}.bn2", h, mask, training))
            X = tn.add(X, h)
        return X

    def head(self, X: Tensor) -> Tensor:
        return gclassifier_logits(X, self.classifier_adjacency(), self.params["head.W_S"],
                                  self.params["head.bias"])

    def forward(self, X, mask=None, training: bool = False) -> HeadOutputs:
        """Both heads' logits for ``B x T x D1`` features and a ``B x T`` mask."""
        X = tn.as_tensor(np.asarray(X.data if isinstance(X, Tensor) else X,
                                    dtype=np.dtype(self.config.dtype)))
        if X.ndim == 2:
            X = tn.reshape(X, (1,) + X.shape)
            if mask is not None:
                mask = np.asarray(mask).reshape(1, -1)
        if X.shape[-1] != self.config.D1:
            raise tn.ShapeError(f"input width {X.shape[-1]} does not match D1={self.config.D1}")
        h = self.rtm(X, training, mask)
        rtm_logits = self.head(h)
        for i in range(self.config.L):
            h = self.block(i, h, training, mask)
        return HeadOutputs(self.head(h), rtm_logits)

    def loss(self, X, Y, mask=None, training: bool = True) -> Tensor:
        out = self.forward(X, mask, training)
        Y = np.asarray(Y)
        if Y.ndim == 2:
            Y = Y[None]
            if mask is not None:
                mask = np.asarray(mask).reshape(1, -1)
        return total_loss(tn.sigmoid(out.ctm_logits), tn.sigmoid(out.rtm_logits), Y,
                          self.config.alpha, mask)

    def predict_logits(self, X, mask=None) -> np.ndarray:
        """Eval-mode CTM-head logits."""
        with tn.no_grad():
            return self.forward(X, mask, training=False).ctm_logits.data

    def block_adjacencies(self, X) -> list[np.ndarray]:
        """Per-block superimposed adjacency for a single eval-mode video."""
        out = []
        with tn.no_grad():
            h = self.rtm(np.asarray(X, dtype=np.dtype(self.config.dtype))[None], False)
            for i in range(self.config.L):
                if self.config.use_cgcn:
                    out.append(self.adjacency(i, h).data[0])
                h = self.block(i, h, False)
        return out

    # -- state
    def state(self) -> dict[str, np.ndarray]:
        s = {name: p.data for name, p in self.params.items()}
        s.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        s["A_S"] = self.A_S
        return s

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        dt = np.dtype(self.config.dtype)
        for name, p in self.params.items():
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if state[name].shape != p.shape:
                raise ValueError(f"parameter {name!r}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=dt)
        for name in self.buffers:
            self.buffers[name] = np.array(state[f"buffer:{name}"], dtype=dt)
        self.set_cooccurrence(state["A_S"])


def count_parameters(model: CTRN) -> dict[str, int]:
    """Parameter counts per top-level module plus ``"total"``."""
    counts: dict[str, int] = {}
    for name, p in model.params.items():
        group = name.split(".")[0]
        if group.startswith("block"):
            group = "ctm"
        counts[group] = counts.get(group, 0) + int(p.data.size)
    counts["total"] = sum(counts.values())
    return counts


def config_json(config: CtrnConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
