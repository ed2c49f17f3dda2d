"""Single-positive multi-label losses with analytic gradients

Every loss is averaged over the M classes of an example and then over the
batch. Gradients are taken with respect to the logits z, using
dp/dz = p (1 - p); pseudo-targets (ROLE estimates, large-loss selections)
are constants within a step.
"""
import logging
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Optional

import numpy as np

from .conf import settings
from .exceptions import LossConfigurationError, ShapeError
from .labelspace import LabelState
from .schemas import LossSchema, resolve
from .utils import make_rng

logger = logging.getLogger(__name__)

POSITIVE, NEGATIVE, UNKNOWN = int(LabelState.POSITIVE), int(LabelState.NEGATIVE), int(LabelState.UNKNOWN)


class LossKind(str, Enum):
    BCE_FULL = 'BCEFull'
    AN = 'AN'
    WAN = 'WAN'
    LS = 'LS'
    ROLE = 'ROLE'
    EM = 'EM'
    LLR = 'LLR'
    LLCT = 'LLCt'
    LLCP = 'LLCp'


LL_KINDS = frozenset({LossKind.LLR, LossKind.LLCT, LossKind.LLCP})


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.AN
    gamma: float = 1.0
    eps_ls: float = 0.1
    alpha_em: float = 0.1
    lambda_role: float = 1.0
    delta_rel: float = 0.1
    expected_positives_k: int = 1
    role_lr: float = 10.0
    a: int = 1
    b: float = 1.0

    def __post_init__(self):
        try:
            object.__setattr__(self, 'kind', LossKind(self.kind))
        except ValueError:
            raise LossConfigurationError(f'unknown loss kind: {self.kind}')
        if not 0 < self.gamma <= 1:
            raise LossConfigurationError(f'gamma must be in (0, 1], got {self.gamma}')
        if not 0 <= self.eps_ls < 1:
            raise LossConfigurationError(f'eps_ls must be in [0, 1), got {self.eps_ls}')
        if not self.alpha_em > 0:
            raise LossConfigurationError(f'alpha_em must be positive, got {self.alpha_em}')
        if self.delta_rel < 0:
            raise LossConfigurationError(f'delta_rel must be non-negative, got {self.delta_rel}')
        if self.a not in (0, 1):
            raise LossConfigurationError(f'a must be 0 or 1, got {self.a}')
        if self.b < 0:
            raise LossConfigurationError(f'b must be non-negative, got {self.b}')

    @classmethod
    def from_config(cls, values):
        values = resolve(LossSchema, values)
        values.pop('preset', None)
        return cls(**values)

    def as_dict(self):
        result = {f.name: getattr(self, f.name) for f in fields(self)}
        result['kind'] = self.kind.value
        return result


class RoleState:
    """Jointly trained table of per-(example, class) label estimates

    Observed positives are pinned to 1 and known negatives to 0.
    """

    def __init__(self, estimates, labels):
        self.estimates = np.array(estimates, dtype=np.float64)
        self.labels = np.asarray(labels)
        if self.estimates.shape != self.labels.shape:
            raise ShapeError(
                f'estimates {self.estimates.shape} do not match labels {self.labels.shape}'
            )
        self.pin()

    @classmethod
    def init(cls, labels, seed=0, *keys):
        labels = np.asarray(labels)
        rng = make_rng(seed, *keys)
        return cls(rng.uniform(0.4, 0.6, size=labels.shape), labels)

    def pin(self, rows=None):
        rows = slice(None) if rows is None else rows
        view = self.estimates[rows]
        labels = self.labels[rows]
        view[labels == POSITIVE] = 1.0
        view[labels == NEGATIVE] = 0.0
        self.estimates[rows] = view

    def rows(self, example_ids):
        return self.estimates[np.asarray(example_ids)]

    def update(self, example_ids, grad, lr):
        example_ids = np.asarray(example_ids)
        free = self.labels[example_ids] == UNKNOWN
        # np.add.at keeps repeated ids additive
        step = np.where(free, -lr * grad, 0.0)
        np.add.at(self.estimates, example_ids, step)
        clip = settings.ESTIMATE_CLIP
        rows = self.estimates[example_ids]
        out = free & ((rows < clip) | (rows > 1 - clip))
        if out.any():
            logger.warning(f'role estimates clamped count={int(out.sum())}')
        rows = np.where(free, np.clip(rows, clip, 1 - clip), rows)
        self.estimates[example_ids] = rows
        self.pin(example_ids)

    def to_document(self):
        return {'estimates': self.estimates.tolist(), 'labels': self.labels.tolist()}

    @classmethod
    def from_document(cls, doc, labels=None):
        if labels is None:
            labels = np.array(doc['labels'], dtype=np.int8)
        return cls(doc['estimates'], labels)


class FlipStore:
    """Permanent large-loss corrections, keyed by (example id, class)"""

    def __init__(self, flips=()):
        self.flips = set((int(e), int(c)) for e, c in flips)

    def __len__(self):
        return len(self.flips)

    def __contains__(self, key):
        return key in self.flips

    def mask(self, example_ids, M):
        result = np.zeros((len(example_ids), M), dtype=bool)
        if not self.flips:
            return result
        for i, e in enumerate(example_ids):
            for c in range(M):
                if (int(e), c) in self.flips:
                    result[i, c] = True
        return result

    def commit(self, example_ids, mask):
        for i, c in zip(*np.nonzero(mask)):
            self.flips.add((int(example_ids[i]), int(c)))

    def to_document(self):
        return sorted([list(f) for f in self.flips])

    @classmethod
    def from_document(cls, doc):
        return cls(tuple(f) for f in doc)


@dataclass
class BatchContext:
    """Everything a loss needs about one batch

    Arguments:
        epoch: 1-based epoch counter t
        example_ids: row ids in the training set
        labels: (B, M) tri-state matrix (1/0/-1)
        probabilities: (B, M) sigmoid outputs, clamped on construction
        flipped: (B, M) permanent corrections already in the flip store
        ll_mask: optional fixed large-loss selection
        anchors: optional (probabilities, estimates) held as the stop-gradient
            operands of ROLE; the live values are used when absent
    """
    epoch: int
    example_ids: np.ndarray
    labels: np.ndarray
    probabilities: np.ndarray
    flipped: Optional[np.ndarray] = None
    ll_mask: Optional[np.ndarray] = None
    anchors: Optional[tuple] = None

    def __post_init__(self):
        self.example_ids = np.asarray(self.example_ids)
        self.labels = np.asarray(self.labels)
        p_min = settings.P_MIN
        self.probabilities = np.clip(
            np.asarray(self.probabilities, dtype=np.float64), p_min, 1 - p_min
        )
        if self.labels.shape != self.probabilities.shape:
            raise ShapeError(
                f'labels {self.labels.shape} do not match probabilities {self.probabilities.shape}'
            )
        if self.epoch < 1:
            raise LossConfigurationError(f'epoch must be >= 1, got {self.epoch}')
        if self.flipped is None:
            self.flipped = np.zeros(self.labels.shape, dtype=bool)

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    ll_mask: Optional[np.ndarray] = None
    flips: Optional[np.ndarray] = None
    role_grad: Optional[np.ndarray] = None
    parts: dict = field(default_factory=dict)


def term_bce_pos(p):
    """-ln p and its derivative"""
    p = np.asarray(p, dtype=np.float64)
    return -np.log(p) + 0.0, -1.0 / p


def term_bce_neg(p):
    """-ln(1 - p) and its derivative"""
    p = np.asarray(p, dtype=np.float64)
    return -np.log1p(-p) + 0.0, 1.0 / (1.0 - p)


def term_entropy(p):
    """Binary entropy H(p) = p L+ + (1 - p) L- and its derivative"""
    pos, _ = term_bce_pos(p)
    neg, _ = term_bce_neg(p)
    return p * pos + (1 - p) * neg, np.log1p(-p) - np.log(p)


def positive_term(spec, p):
    pos, dpos = term_bce_pos(p)
    if spec.kind is LossKind.LS:
        neg, dneg = term_bce_neg(p)
        w = (1 - spec.eps_ls) / 2
        v = spec.eps_ls / 2
        return w * pos + v * neg, w * dpos + v * dneg
    return pos, dpos


def unknown_term(spec, p):
    """Assumed-negative term of each loss family (large-loss selections aside)"""
    kind = spec.kind
    neg, dneg = term_bce_neg(p)
    if kind is LossKind.WAN:
        return spec.gamma * neg, spec.gamma * dneg
    if kind is LossKind.LS:
        pos, dpos = term_bce_pos(p)
        w = (1 - spec.eps_ls) / 2
        v = spec.eps_ls / 2
        return w * neg + v * pos, w * dneg + v * dpos
    if kind is LossKind.EM:
        h, dh = term_entropy(p)
        return -spec.alpha_em * h, -spec.alpha_em * dh
    return neg, dneg


_clamp_reported = set()


def ll_fraction(epoch, delta_rel):
    raw = (epoch - 1) * delta_rel / 100.0
    if raw > 1 and (epoch, delta_rel) not in _clamp_reported:
        _clamp_reported.add((epoch, delta_rel))
        logger.warning(f'large-loss schedule clamped epoch={epoch} fraction={raw:.4f}')
    return min(max(raw, 0.0), 1.0)


def ll_select(losses, epoch, delta_rel):
    """Mark the largest (t - 1) * delta_rel percent of losses

    Ties are broken by the lower flat index first.
    """
    losses = np.asarray(losses, dtype=np.float64).ravel()
    mask = np.zeros(losses.shape, dtype=bool)
    fraction = ll_fraction(epoch, delta_rel)
    k = int(math.floor(fraction * len(losses) + 1e-9))
    if k:
        order = np.argsort(-losses, kind='stable')
        mask[order[:k]] = True
    return mask


def expected_positive_penalty(estimates, k):
    """mean over examples of (mean_c estimate - k / M)^2"""
    estimates = np.asarray(estimates, dtype=np.float64)
    M = estimates.shape[1]
    gap = estimates.mean(axis=1) - k / M
    return float(np.mean(gap ** 2))


def role_step(estimates, ctx, lambda_role, k=1, spec=None):
    """ROLE objective: symmetric stop-gradient BCE plus expected-positive penalty

    Returns:
        (value, d/dz, d/destimates) for the batch
    """
    spec = spec or LossSpec(kind=LossKind.ROLE, lambda_role=lambda_role, expected_positives_k=k)
    p = ctx.probabilities
    labels = ctx.labels
    B, M = labels.shape
    estimates = np.asarray(estimates, dtype=np.float64)
    if estimates.shape != (B, M):
        raise ShapeError(f'estimates {estimates.shape} do not match batch {(B, M)}')
    positive = labels == POSITIVE
    negative = labels == NEGATIVE
    unknown = labels == UNKNOWN
    n = B * M

    pos, dpos = term_bce_pos(p)
    neg, dneg = term_bce_neg(p)
    clip = settings.ESTIMATE_CLIP
    y = np.clip(estimates, clip, 1 - clip)
    if ctx.anchors is None:
        p_stop, y_stop = p, y
    else:
        p_stop = np.clip(np.asarray(ctx.anchors[0], dtype=np.float64), settings.P_MIN, 1 - settings.P_MIN)
        y_stop = np.clip(np.asarray(ctx.anchors[1], dtype=np.float64), clip, 1 - clip)
    # classifier side: BCE(p, stop(y))
    v1 = y_stop * pos + (1 - y_stop) * neg
    # estimator side: BCE(y, stop(p))
    v2 = -(p_stop * np.log(y) + (1 - p_stop) * np.log1p(-y))

    weight = spec.a * unknown
    values = np.zeros((B, M))
    values[positive] = pos[positive]
    values[negative] = spec.b * neg[negative]
    values += weight * 0.5 * (v1 + v2)

    grad_p = np.zeros((B, M))
    grad_p[positive] = dpos[positive]
    grad_p[negative] = spec.b * dneg[negative]
    grad_p += weight * 0.5 * (y_stop * dpos + (1 - y_stop) * dneg)
    grad_z = grad_p * p * (1 - p) / n

    grad_est = weight * 0.5 * (y - p_stop) / (y * (1 - y)) / n

    pinned = np.where(positive, 1.0, np.where(negative, 0.0, estimates))
    gap = pinned.mean(axis=1) - k / M
    penalty = lambda_role * float(np.mean(gap ** 2))
    grad_est = grad_est + np.where(unknown, lambda_role * 2 * gap[:, None] / (M * B), 0.0)

    value = float(values.sum() / n) + penalty
    return value, grad_z, grad_est


def loss_bce_full(ctx):
    """Standard BCE on a fully labelled batch"""
    labels = ctx.labels
    if np.any(labels == UNKNOWN):
        raise LossConfigurationError('BCE-Full requires a batch without Unknown labels')
    p = ctx.probabilities
    B, M = labels.shape
    pos, dpos = term_bce_pos(p)
    neg, dneg = term_bce_neg(p)
    y = labels == POSITIVE
    values = np.where(y, pos, neg)
    grad = np.where(y, dpos, dneg) * p * (1 - p) / (B * M)
    return float(values.sum() / (B * M)), grad


def spml_loss(spec, ctx, role_state=None):
    """Loss value, d/dz and auxiliary outputs for one batch"""
    kind = spec.kind
    if kind is LossKind.BCE_FULL:
        value, grad = loss_bce_full(ctx)
        return LossResult(value=value, grad=grad)

    if kind is LossKind.ROLE:
        if role_state is None:
            raise LossConfigurationError('ROLE loss requires a role_state')
        estimates = role_state.rows(ctx.example_ids)
        value, grad, role_grad = role_step(
            estimates,
            ctx,
            spec.lambda_role,
            spec.expected_positives_k,
            spec=spec,
        )
        parts = {'role_reg': spec.lambda_role * expected_positive_penalty(estimates, spec.expected_positives_k)}
        return LossResult(value=value, grad=grad, role_grad=role_grad, parts=parts)

    p = ctx.probabilities
    labels = ctx.labels
    B, M = labels.shape
    n = B * M
    flipped = ctx.flipped if kind is LossKind.LLCP else np.zeros((B, M), dtype=bool)
    positive = (labels == POSITIVE) | (flipped & (labels == UNKNOWN))
    negative = labels == NEGATIVE
    unknown = (labels == UNKNOWN) & ~positive

    values = np.zeros((B, M))
    grad_p = np.zeros((B, M))

    v, d = positive_term(spec, p)
    values[positive] = v[positive]
    grad_p[positive] = d[positive]

    neg, dneg = term_bce_neg(p)
    values[negative] = spec.b * neg[negative]
    grad_p[negative] = spec.b * dneg[negative]

    v, d = unknown_term(spec, p)
    ll_mask = None
    if kind in LL_KINDS:
        if ctx.ll_mask is not None:
            ll_mask = np.asarray(ctx.ll_mask, dtype=bool) & unknown
        else:
            ll_mask = np.zeros((B, M), dtype=bool)
            # only unknown entries are candidates for rejection/correction
            ll_mask[unknown] = ll_select(neg[unknown], ctx.epoch, spec.delta_rel)
        if kind is LossKind.LLR:
            v = np.where(ll_mask, 0.0, v)
            d = np.where(ll_mask, 0.0, d)
        else:
            pos, dpos = term_bce_pos(p)
            v = np.where(ll_mask, pos, v)
            d = np.where(ll_mask, dpos, d)
    values[unknown] = spec.a * v[unknown]
    grad_p[unknown] = spec.a * d[unknown]

    parts = {
        'positive': float(values[positive].sum() / n),
        'negative': float(values[negative].sum() / n),
        'unknown': float(values[unknown].sum() / n),
    }
    return LossResult(
        value=float(values.sum() / n),
        grad=grad_p * p * (1 - p) / n,
        ll_mask=ll_mask,
        flips=ll_mask if kind is LossKind.LLCP else None,
        parts=parts,
    )
