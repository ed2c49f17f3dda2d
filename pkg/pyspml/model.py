"""Multi-layer perceptron with a sigmoid head

ReLU hidden layers, explicit forward/backward passes and Adam with a
learning-rate multiplier per layer. Everything is float64.
"""
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.special import expit

from .conf import settings
from .exceptions import ShapeError
from .utils import make_rng


@dataclass
class ModelParams:
    layers: List[Tuple[np.ndarray, np.ndarray]]
    lr_multipliers: List[float] = None

    def __post_init__(self):
        self.layers = [
            (np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
            for w, b in self.layers
        ]
        if not self.layers:
            raise ShapeError('a model needs at least one layer')
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f'layer {i}: weights {w.shape} and biases {b.shape} do not match')
            if i and self.layers[i - 1][0].shape[1] != w.shape[0]:
                raise ShapeError(f'layer {i}: input dimension {w.shape[0]} does not chain')
        if self.lr_multipliers is None:
            self.lr_multipliers = [1.0] * len(self.layers)
        self.lr_multipliers = [float(m) for m in self.lr_multipliers]
        if len(self.lr_multipliers) != len(self.layers):
            raise ShapeError('one learning-rate multiplier per layer is required')

    @property
    def dims(self):
        return (self.layers[0][0].shape[0],) + tuple(w.shape[1] for w, _ in self.layers)

    @property
    def embedding_dim(self):
        return self.dims[-2]

    def copy(self):
        return ModelParams(
            [(w.copy(), b.copy()) for w, b in self.layers], list(self.lr_multipliers)
        )

    def is_finite(self):
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in self.layers)

    def to_document(self):
        return {
            'dims': list(self.dims),
            'lr_multipliers': list(self.lr_multipliers),
            'layers': [
                {'weights': w.tolist(), 'biases': b.tolist()} for w, b in self.layers
            ],
        }

    @classmethod
    def from_document(cls, doc):
        params = cls(
            [(layer['weights'], layer['biases']) for layer in doc['layers']],
            doc.get('lr_multipliers'),
        )
        if list(params.dims) != list(doc['dims']):
            raise ShapeError(f"checkpoint dims {doc['dims']} do not match layers {params.dims}")
        return params


@dataclass
class ForwardTrace:
    """Outputs of one forward pass

    `inputs[i]` is the input of layer i and `pre[i]` its pre-activation.
    """
    z: np.ndarray
    p: np.ndarray
    embedding: np.ndarray
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def init(cls, params):
        return cls(
            [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers],
            [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers],
            0,
        )

    def to_document(self):
        return {
            't': self.t,
            'm': [{'weights': w.tolist(), 'biases': b.tolist()} for w, b in self.m],
            'v': [{'weights': w.tolist(), 'biases': b.tolist()} for w, b in self.v],
        }

    @classmethod
    def from_document(cls, doc):
        def load(items):
            return [
                (np.asarray(i['weights'], dtype=np.float64), np.asarray(i['biases'], dtype=np.float64))
                for i in items
            ]

        return cls(load(doc['m']), load(doc['v']), int(doc['t']))


def default_dims(D, M, hidden=(128,)):
    return (D,) + tuple(hidden) + (M,)


def mlp_init(dims, seed=0, last_layer_lr_mult=1.0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases"""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or min(dims) < 1:
        raise ShapeError(f'invalid dims {dims}')
    rng = make_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(1.0 / fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
    multipliers = [1.0] * (len(layers) - 1) + [float(last_layer_lr_mult)]
    return ModelParams(layers, multipliers)


def forward(params, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.dims[0]:
        raise ShapeError(f'input {X.shape} does not match model dimension {params.dims[0]}')
    inputs, pre = [], []
    h = X
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        inputs.append(h)
        a = h @ w + b
        pre.append(a)
        h = a if i == last else np.maximum(a, 0.0)
    p_min = settings.P_MIN
    p = np.clip(expit(h), p_min, 1 - p_min)
    return ForwardTrace(z=h, p=p, embedding=inputs[-1], inputs=inputs, pre=pre)


def backward(params, trace, grad_z, grad_embedding=None):
    """Reverse-mode gradients of a scalar objective

    Arguments:
        grad_z: d objective / d logits, (B, M)
        grad_embedding: optional d objective / d embedding, (B, E)
    Returns:
        list of (d weights, d biases) per layer
    """
    grad = np.asarray(grad_z, dtype=np.float64)
    if grad.shape != trace.z.shape:
        raise ShapeError(f'grad_z {grad.shape} does not match logits {trace.z.shape}')
    if grad_embedding is not None:
        grad_embedding = np.asarray(grad_embedding, dtype=np.float64)
        if grad_embedding.shape != trace.embedding.shape:
            raise ShapeError(
                f'grad_embedding {grad_embedding.shape} does not match {trace.embedding.shape}'
            )
    grads = [None] * len(params.layers)
    for i in reversed(range(len(params.layers))):
        w, _ = params.layers[i]
        grads[i] = (trace.inputs[i].T @ grad, grad.sum(axis=0))
        if i == 0:
            break
        grad = grad @ w.T
        if i == len(params.layers) - 1 and grad_embedding is not None:
            grad = grad + grad_embedding
        # relu subgradient is 0 at 0
        grad = grad * (trace.pre[i - 1] > 0)
    return grads


def adam_step(params, grads, state, base_lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam step; returns new (params, state)"""
    beta1, beta2 = betas
    t = state.t + 1
    layers, m_out, v_out = [], [], []
    for (w, b), (gw, gb), (mw, mb), (vw, vb), mult in zip(
        params.layers, grads, state.m, state.v, params.lr_multipliers
    ):
        lr = base_lr * mult
        updated = []
        moments_m, moments_v = [], []
        for x, g, m, v in ((w, gw, mw, vw), (b, gb, mb, vb)):
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            updated.append(x - lr * m_hat / (np.sqrt(v_hat) + eps))
            moments_m.append(m)
            moments_v.append(v)
        layers.append(tuple(updated))
        m_out.append(tuple(moments_m))
        v_out.append(tuple(moments_v))
    return ModelParams(layers, list(params.lr_multipliers)), AdamState(m_out, v_out, t)


def predict(params, X, batch_size=1024):
    """Probabilities for X in row order"""
    X = np.asarray(X, dtype=np.float64)
    if not len(X):
        return np.zeros((0, params.dims[-1]))
    chunks = [forward(params, X[i:i + batch_size]).p for i in range(0, len(X), batch_size)]
    return np.concatenate(chunks, axis=0)
