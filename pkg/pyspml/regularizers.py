"""Asset-consistency regularization

R_P pulls a clip's predictions toward a moving average of predictions over
its asset; R_E does the same for the penultimate embedding. The averages are
constants in the gradient and are updated after the step.
"""
import logging
from enum import Enum

import numpy as np

from .exceptions import ShapeError
from .utils import make_rng

logger = logging.getLogger(__name__)


class RegKind(str, Enum):
    NONE = 'none'
    RP = 'rp'
    RE = 're'


class PseudoTargetStore:
    """Per-asset EMA prediction vectors and embedding means"""

    def __init__(self, asset_ids, y_bar, d_bar, eps_ema, eps_ema_embed=None):
        self.asset_ids = list(asset_ids)
        self.y_bar = np.array(y_bar, dtype=np.float64)
        self.d_bar = np.array(d_bar, dtype=np.float64)
        self.eps_ema = eps_ema
        self.eps_ema_embed = eps_ema if eps_ema_embed is None else eps_ema_embed
        if len(self.y_bar) != len(self.asset_ids) or len(self.d_bar) != len(self.asset_ids):
            raise ShapeError('pseudo-target rows must match asset ids')

    def __len__(self):
        return len(self.asset_ids)

    def targets(self, asset_rows):
        return self.y_bar[asset_rows]

    def embedding_targets(self, asset_rows):
        return self.d_bar[asset_rows]

    def update(self, asset_rows, order_indices, p=None, d=None):
        """EMA update, sequential in ascending (asset, clip order) order"""
        asset_rows = np.asarray(asset_rows)
        order = np.lexsort((np.asarray(order_indices), asset_rows))
        for i in order:
            a = asset_rows[i]
            if p is not None:
                self.y_bar[a] = ema_update(self.y_bar[a], p[i], self.eps_ema)
            if d is not None:
                self.d_bar[a] = ema_update(self.d_bar[a], d[i], self.eps_ema_embed)

    def to_document(self):
        return {
            'asset_ids': list(self.asset_ids),
            'eps_ema': self.eps_ema,
            'eps_ema_embed': self.eps_ema_embed,
            'y_bar': self.y_bar.tolist(),
            'd_bar': self.d_bar.tolist(),
        }

    @classmethod
    def from_document(cls, doc):
        return cls(
            doc['asset_ids'],
            doc['y_bar'],
            doc['d_bar'],
            doc['eps_ema'],
            doc['eps_ema_embed'],
        )


def init_pseudo_targets(asset_ids, M, E, seed=0, eps_ema=1e-2, eps_ema_embed=None):
    """y_bar ~ U(0.4, 0.6) per entry, d_bar = 0"""
    asset_ids = list(asset_ids)
    rng = make_rng(seed)
    y_bar = rng.uniform(0.4, 0.6, size=(len(asset_ids), M))
    d_bar = np.zeros((len(asset_ids), E))
    return PseudoTargetStore(asset_ids, y_bar, d_bar, eps_ema, eps_ema_embed)


def rp_term(p, y_bar):
    """Soft-target BCE of one clip's predictions against its asset average

    Returns:
        (value, d/dp); value is the mean over classes, the average is a constant
    """
    p = np.asarray(p, dtype=np.float64)
    y_bar = np.asarray(y_bar, dtype=np.float64)
    if p.ndim != 1 or p.shape != y_bar.shape:
        raise ShapeError(f'predictions {p.shape} do not match targets {y_bar.shape}')
    M = p.shape[0]
    values = -(y_bar * np.log(p) + (1 - y_bar) * np.log1p(-p))
    grad = -(y_bar / p - (1 - y_bar) / (1 - p)) / M
    return float(values.sum() / M), grad


def rp_batch(p, y_bar):
    """Batch mean of R_P with its gradient with respect to the logits"""
    p = np.asarray(p, dtype=np.float64)
    B, M = p.shape
    values = -(y_bar * np.log(p) + (1 - y_bar) * np.log1p(-p))
    return float(values.sum() / (B * M)), (p - y_bar) / (B * M)


def ema_update(y_bar, p, eps_ema):
    return (1 - eps_ema) * np.asarray(y_bar) + eps_ema * np.asarray(p)


def re_term(d, d_bar):
    """Mean-squared error between one embedding and its asset average"""
    d = np.asarray(d, dtype=np.float64)
    d_bar = np.asarray(d_bar, dtype=np.float64)
    if d.ndim != 1 or d.shape != d_bar.shape:
        raise ShapeError(f'embedding {d.shape} does not match average {d_bar.shape}')
    E = d.shape[-1]
    diff = d - d_bar
    return float(np.sum(diff ** 2) / E), 2 * diff / E


def re_batch(d, d_bar):
    """Batch mean of R_E with its gradient with respect to the embeddings"""
    d = np.asarray(d, dtype=np.float64)
    if d.shape != np.shape(d_bar):
        raise ShapeError(f'embedding {d.shape} does not match average {np.shape(d_bar)}')
    B, E = d.shape
    diff = d - d_bar
    return float(np.sum(diff ** 2) / (B * E)), 2 * diff / (B * E)


def attach_regularizer(loss_value_grad, reg_value_grad, alpha_reg):
    """Combine (value, grads) pairs as base + alpha * reg

    Gradients are dicts keyed by what they differentiate ("z", "d");
    missing keys count as zero.
    """
    value, grads = loss_value_grad
    reg_value, reg_grads = reg_value_grad
    combined = dict(grads)
    for key, grad in reg_grads.items():
        if key in combined:
            combined[key] = combined[key] + alpha_reg * grad
        else:
            combined[key] = alpha_reg * grad
    return value + alpha_reg * reg_value, combined
