"""Deterministic training loop, hyperparameter sweeps and gradient checks"""
import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from copy import deepcopy
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import expit

from .conf import settings
from .evaluation import evaluate, write_eval_artifacts
from .exceptions import (
    ConfigValidationError,
    EvaluationError,
    LossConfigurationError,
    TrainingError,
)
from .labelspace import LabelState, load_manifest
from .losses import (
    BatchContext,
    FlipStore,
    LL_KINDS,
    LossKind,
    LossSpec,
    RoleState,
    spml_loss,
)
from .model import (
    AdamState,
    ModelParams,
    adam_step,
    backward,
    default_dims,
    forward,
    mlp_init,
)
from .presets import apply_preset
from .regularizers import (
    PseudoTargetStore,
    RegKind,
    attach_regularizer,
    init_pseudo_targets,
    re_batch,
    rp_batch,
)
from .schemas import Schemas, resolve
from .utils import make_rng, read_json, write_json

logger = logging.getLogger(__name__)

STREAM_SHUFFLE = 11
STREAM_ROLE = 12
STREAM_GRADCHECK = 13

LR_GRID = (1e-2, 1e-3, 1e-4, 1e-5)
METRICS_COLUMNS = ('epoch', 'train_loss', 'val_map')


@dataclass
class TrainConfig:
    """Resolved experiment config

    Sections are plain dicts validated by their schemas; `loss` is also
    available as a LossSpec.
    """
    model: dict
    loss: dict
    reg: dict
    train: dict
    data: Optional[dict] = None

    def __post_init__(self):
        self.spec = LossSpec.from_config(self.loss)
        self.reg_kind = RegKind(self.reg['kind'])

    @classmethod
    def from_config(cls, config=None, require_data=False):
        config = apply_preset(config or {})
        unknown = set(config) - set(Schemas)
        if unknown:
            raise ConfigValidationError(f"unknown config sections: {', '.join(sorted(unknown))}")
        sections = {}
        for name, schema in Schemas.items():
            if name == 'data' and not require_data and not config.get('data'):
                continue
            sections[name] = resolve(schema, config.get(name))
        return cls(**sections)

    @property
    def epochs(self):
        return self.train['epochs']

    @property
    def batch_size(self):
        return self.train['batch_size']

    @property
    def seed(self):
        return self.train['seed']

    def to_document(self):
        doc = {
            'model': self.model,
            'loss': self.loss,
            'reg': self.reg,
            'train': self.train,
        }
        if self.data is not None:
            doc = {'data': self.data, **doc}
        return deepcopy(doc)


@dataclass
class RunRecord:
    train_loss: List[float] = field(default_factory=list)
    val_map: List[Optional[float]] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_map: Optional[float] = None
    test: Optional[dict] = None
    config: dict = field(default_factory=dict)
    seed: int = 0
    regime: Optional[str] = None
    wall_clock: Optional[float] = None

    @property
    def score(self):
        """Model-selection score; runs without validation rank last"""
        if self.best_val_map is None or math.isnan(self.best_val_map):
            return -math.inf
        return self.best_val_map

    def metrics_rows(self):
        for epoch, (loss, value) in enumerate(zip(self.train_loss, self.val_map), 1):
            yield [epoch, repr(loss), '' if value is None else repr(value)]

    def to_document(self):
        return {
            'loss_kind': self.config.get('loss', {}).get('kind'),
            'reg_kind': self.config.get('reg', {}).get('kind'),
            'regime': self.regime,
            'seed': self.seed,
            'train_loss': list(self.train_loss),
            'val_map': list(self.val_map),
            'best_epoch': self.best_epoch,
            'best_val_map': self.best_val_map,
            'test_map': None if self.test is None else self.test.get('map'),
            'wall_clock': self.wall_clock,
            'config': self.config,
        }


class Trainer:
    """Owns every piece of mutable training state

    Model parameters, optimizer moments, the large-loss flip store, ROLE
    label estimates and asset pseudo-targets all live here and are only
    written by `step`.
    """

    def __init__(self, config, train_set, val_set=None):
        if not isinstance(config, TrainConfig):
            config = TrainConfig.from_config(config)
        if not len(train_set):
            raise TrainingError('training set is empty')
        self.config = config
        self.spec = config.spec
        self.train_set = train_set
        self.val_set = val_set
        M, D = train_set.meta.M, train_set.meta.D
        if self.spec.kind is LossKind.BCE_FULL and np.any(
            train_set.label_matrix == LabelState.UNKNOWN
        ):
            raise LossConfigurationError('BCEFull needs a fully labelled training set')

        dims = default_dims(D, M, config.model['hidden'])
        self.params = mlp_init(dims, config.model['seed'], config.model['last_layer_lr_mult'])
        self.optimizer = AdamState.init(self.params)
        self.flips = FlipStore()
        self.role = None
        if self.spec.kind is LossKind.ROLE:
            self.role = RoleState.init(train_set.label_matrix, config.seed, STREAM_ROLE)
        self.pseudo = None
        if config.reg_kind is not RegKind.NONE:
            if train_set.is_flat:
                raise ConfigValidationError('reg.kind: asset regularization needs assets')
            self.pseudo = init_pseudo_targets(
                [asset.asset_id for asset in train_set.assets],
                M,
                self.params.embedding_dim,
                seed=config.reg['seed'],
                eps_ema=config.reg['eps_ema'],
                eps_ema_embed=config.reg['eps_ema_embed'],
            )
        self.epoch = 0
        self.best = self.params
        self.record = RunRecord(config=config.to_document(), seed=config.seed)

    def _check_finite(self, value, term, batch):
        if not np.all(np.isfinite(value)):
            raise TrainingError(
                f'non-finite loss epoch={self.epoch} batch={batch} term={term}'
            )

    def step(self, rows, batch=0):
        """One optimizer step on the given training rows; returns the batch objective"""
        data = self.train_set
        rows = np.asarray(rows)
        M = data.meta.M
        trace = forward(self.params, data.features[rows])
        ctx = BatchContext(
            epoch=self.epoch,
            example_ids=rows,
            labels=data.label_matrix[rows],
            probabilities=trace.p,
            flipped=self.flips.mask(rows, M),
        )
        result = spml_loss(self.spec, ctx, self.role)
        for term, value in result.parts.items():
            self._check_finite(value, term, batch)
        self._check_finite(result.value, self.spec.kind.value, batch)
        objective = (result.value, {'z': result.grad})

        if self.pseudo is not None:
            assets = data.asset_rows[rows]
            alpha = self.config.reg['alpha']
            if self.config.reg_kind is RegKind.RP:
                value, grad = rp_batch(ctx.probabilities, self.pseudo.targets(assets))
                reg = (value, {'z': grad})
            else:
                value, grad = re_batch(trace.embedding, self.pseudo.embedding_targets(assets))
                reg = (value, {'d': grad})
            self._check_finite(value, self.config.reg_kind.value, batch)
            objective = attach_regularizer(objective, reg, alpha)

        value, grads = objective
        param_grads = backward(self.params, trace, grads['z'], grads.get('d'))
        train = self.config.train
        self.params, self.optimizer = adam_step(
            self.params,
            param_grads,
            self.optimizer,
            train['base_lr'],
            tuple(train['betas']),
            train['adam_eps'],
        )
        if not self.params.is_finite():
            raise TrainingError(f'non-finite parameters epoch={self.epoch} batch={batch}')

        # pseudo-labels move after the gradient step
        if self.role is not None:
            self.role.update(rows, result.role_grad, self.spec.role_lr)
        if result.flips is not None:
            self.flips.commit(rows, result.flips)
        if self.pseudo is not None:
            rp = self.config.reg_kind is RegKind.RP
            self.pseudo.update(
                assets,
                data.order_indices[rows],
                p=ctx.probabilities if rp else None,
                d=None if rp else trace.embedding,
            )
        return value

    def run_epoch(self):
        self.epoch += 1
        N = len(self.train_set)
        order = make_rng(self.config.seed, STREAM_SHUFFLE, self.epoch).permutation(N)
        size = self.config.batch_size
        total = 0.0
        for batch, start in enumerate(range(0, N, size)):
            rows = order[start:start + size]
            total += self.step(rows, batch) * len(rows)
        return total / N

    def validate(self):
        if self.val_set is None:
            return None
        return evaluate(self.params, self.val_set, filter_fully_labeled=True).map

    def fit(self):
        """Train for the configured epochs; returns (best params, record)"""
        started = time.time()
        record = self.record
        every = self.config.train['eval_every']
        for _ in range(self.config.epochs):
            loss = self.run_epoch()
            value = None
            if self.val_set is not None and self.epoch % every == 0:
                value = self.validate()
                if not math.isnan(value) and (
                    record.best_val_map is None or value > record.best_val_map
                ):
                    record.best_val_map = value
                    record.best_epoch = self.epoch
                    self.best = self.params
            record.train_loss.append(loss)
            record.val_map.append(value)
            logger.info(
                f'epoch={self.epoch} train_loss={loss:.6f} '
                f"val_map={'-' if value is None else f'{value:.4f}'}"
            )
            self._log_metrics(self.epoch, loss, value)
        if record.best_epoch is None:
            # no validation result: keep the final parameters
            self.best = self.params
            record.best_epoch = self.epoch
        record.wall_clock = time.time() - started
        return self.best, record

    def _log_metrics(self, epoch, loss, value):
        path = self.config.train.get('metrics_log')
        if not path:
            return
        new = not os.path.exists(path)
        with open(path, 'a', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            if new:
                writer.writerow(METRICS_COLUMNS)
            writer.writerow([epoch, repr(loss), '' if value is None else repr(value)])

    def checkpoint_document(self):
        doc = self.best.to_document()
        doc.update({
            'epoch': self.epoch,
            'best_epoch': self.record.best_epoch,
            'final': self.params.to_document(),
            'optimizer': self.optimizer.to_document(),
            'flips': self.flips.to_document(),
            'role': None if self.role is None else self.role.to_document(),
            'pseudo_targets': None if self.pseudo is None else self.pseudo.to_document(),
        })
        return doc


def train(config, train_set, val_set=None):
    """Train a model; returns (best-epoch params, RunRecord)"""
    return Trainer(config, train_set, val_set).fit()


@dataclass
class Checkpoint:
    params: ModelParams
    final: ModelParams
    optimizer: AdamState
    flips: FlipStore
    role: Optional[RoleState]
    pseudo_targets: Optional[PseudoTargetStore]
    epoch: int
    best_epoch: Optional[int]


def save_checkpoint(path, trainer):
    write_json(path, trainer.checkpoint_document())


def load_checkpoint(path):
    doc = read_json(path)
    pseudo = doc.get('pseudo_targets')
    role = doc.get('role')
    return Checkpoint(
        params=ModelParams.from_document(doc),
        final=ModelParams.from_document(doc['final']),
        optimizer=AdamState.from_document(doc['optimizer']),
        flips=FlipStore.from_document(doc['flips']),
        role=None if role is None else RoleState.from_document(role),
        pseudo_targets=None if pseudo is None else PseudoTargetStore.from_document(pseudo),
        epoch=doc['epoch'],
        best_epoch=doc.get('best_epoch'),
    )


@dataclass
class SweepResult:
    best_index: int
    best_config: dict
    scores: List[float]
    records: List[RunRecord]


def _sweep_trial(args):
    config, train_set, val_set = args
    _, record = train(config, train_set, val_set)
    return record


def lr_sweep(config, grid=LR_GRID):
    """One config per learning rate of the grid"""
    configs = []
    for lr in grid:
        item = deepcopy(config)
        item.setdefault('train', {})['base_lr'] = lr
        configs.append(item)
    return configs


def sweep(configs, train_set, val_set, workers=1):
    """Pick the config with the highest validation mAP

    Ties go to the earlier config. With workers > 1 trials run in separate
    processes; each trial's seeds come from its own config. `train_set` is
    either one dataset shared by every config or a list with one per config.
    """
    configs = list(configs)
    if not configs:
        raise ConfigValidationError('sweep needs at least one config')
    if val_set is None:
        raise ConfigValidationError('sweep needs a validation set')
    if isinstance(train_set, (list, tuple)):
        train_sets = list(train_set)
        if len(train_sets) != len(configs):
            raise ConfigValidationError(
                f'sweep got {len(train_sets)} training sets for {len(configs)} configs'
            )
    else:
        train_sets = [train_set] * len(configs)
    trials = [(config, data, val_set) for config, data in zip(configs, train_sets)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_sweep_trial, trials))
    else:
        records = [_sweep_trial(trial) for trial in trials]
    scores = [record.score for record in records]
    best = int(np.argmax(scores))
    for i, score in enumerate(scores):
        logger.info(f'sweep trial={i} val_map={score:.4f}')
    logger.info(f'sweep best={best} val_map={scores[best]:.4f}')
    return SweepResult(best, configs[best], scores, records)


@dataclass
class GradcheckReport:
    kind: str
    reg: str
    trials: int
    max_rel_err: float
    failures: List[int] = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures


def norm_relative_error(analytic, numeric):
    """Max-norm relative error: max |a - n| over the largest |a| or |n|, not per entry"""
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def _gradcheck_instance(spec, rng, reg_kind, alpha):
    B = int(rng.integers(2, 5))
    M = int(rng.integers(3, 7))
    E = 3
    labels = np.full((B, M), LabelState.UNKNOWN, dtype=np.int8)
    if spec.kind is LossKind.BCE_FULL:
        labels = (rng.random((B, M)) < 0.3).astype(np.int8)
    else:
        labels[rng.random((B, M)) < 0.3] = LabelState.NEGATIVE
    labels[np.arange(B), rng.integers(M, size=B)] = LabelState.POSITIVE
    unknown = labels == LabelState.UNKNOWN
    instance = {
        'B': B,
        'M': M,
        'labels': labels,
        'z': rng.normal(0.0, 1.5, size=(B, M)),
        'flipped': (rng.random((B, M)) < 0.3) & unknown,
        'll_mask': (rng.random((B, M)) < 0.4) & unknown,
        'estimates': rng.uniform(0.2, 0.8, size=(B, M)),
        'y_bar': rng.uniform(0.1, 0.9, size=(B, M)),
        'd': rng.normal(size=(B, E)),
        'd_bar': rng.normal(size=(B, E)),
        'reg_kind': reg_kind,
        'alpha': alpha,
    }
    return instance


def _objective(spec, inst, z, estimates, d):
    """Total batch objective and its analytic gradients"""
    ids = np.arange(inst['B'])
    ctx = BatchContext(
        epoch=2,
        example_ids=ids,
        labels=inst['labels'],
        probabilities=expit(z),
        flipped=inst['flipped'],
        ll_mask=inst['ll_mask'] if spec.kind in LL_KINDS else None,
        anchors=inst.get('anchors'),
    )
    role = RoleState(estimates, inst['labels']) if spec.kind is LossKind.ROLE else None
    result = spml_loss(spec, ctx, role)
    objective = (result.value, {'z': result.grad})
    if inst['reg_kind'] is RegKind.RP:
        value, grad = rp_batch(ctx.probabilities, inst['y_bar'])
        objective = attach_regularizer(objective, (value, {'z': grad}), inst['alpha'])
    elif inst['reg_kind'] is RegKind.RE:
        value, grad = re_batch(d, inst['d_bar'])
        objective = attach_regularizer(objective, (value, {'d': grad}), inst['alpha'])
    value, grads = objective
    if result.role_grad is not None:
        grads['estimates'] = result.role_grad
    return value, grads


def _numeric(f, x, h):
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        saved = x[index]
        x[index] = saved + h
        up = f(x)
        x[index] = saved - h
        down = f(x)
        x[index] = saved
        grad[index] = (up - down) / (2 * h)
    return grad


def gradcheck(loss_spec, trials=100, seed=0, reg=None, alpha=0.1, corrupt=0.0):
    """Compare analytic gradients of the total objective with central differences

    Arguments:
        loss_spec: LossSpec (or config dict) to check
        reg: None, "rp" or "re" to include an asset regularizer
        corrupt: added to one analytic entry; used to test the harness itself
    Returns:
        GradcheckReport; failures are trial indices above tolerance
    """
    if not isinstance(loss_spec, LossSpec):
        loss_spec = LossSpec.from_config(loss_spec)
    reg_kind = RegKind(reg or 'none')
    h = settings.GRADCHECK_STEP
    tolerance = settings.GRADCHECK_TOLERANCE
    worst = 0.0
    failures = []
    for trial in range(trials):
        rng = make_rng(seed, STREAM_GRADCHECK, trial)
        inst = _gradcheck_instance(loss_spec, rng, reg_kind, alpha)
        z, estimates, d = inst['z'], inst['estimates'], inst['d']
        if loss_spec.kind is LossKind.ROLE:
            inst['anchors'] = (expit(z), estimates.copy())
        _, grads = _objective(loss_spec, inst, z, estimates, d)

        analytic = [grads['z']]
        numeric = [_numeric(lambda x: _objective(loss_spec, inst, x, estimates, d)[0], z.copy(), h)]
        if 'estimates' in grads:
            analytic.append(grads['estimates'])
            numeric.append(_numeric(
                lambda x: _objective(loss_spec, inst, z, x, d)[0], estimates.copy(), h
            ))
        if 'd' in grads:
            analytic.append(grads['d'])
            numeric.append(_numeric(lambda x: _objective(loss_spec, inst, z, estimates, x)[0], d.copy(), h))

        analytic = np.concatenate([a.ravel() for a in analytic])
        numeric = np.concatenate([n.ravel() for n in numeric])
        if corrupt:
            analytic = analytic.copy()
            analytic[0] += corrupt
        error = norm_relative_error(analytic, numeric)
        worst = max(worst, error)
        if error > tolerance:
            failures.append(trial)
    logger.info(
        f'gradcheck kind={loss_spec.kind.value} reg={reg_kind.value} '
        f'trials={trials} max_rel_err={worst:.3e} failures={len(failures)}'
    )
    return GradcheckReport(loss_spec.kind.value, reg_kind.value, trials, worst, failures)


def _regime_label(cfg, dataset):
    return cfg.data.get('regime') or dataset.meta.regime or 'Full'


def write_metrics(path, record):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(METRICS_COLUMNS)
        for row in record.metrics_rows():
            writer.writerow(row)


def run_experiment(config, out_dir):
    """Load manifests, train, evaluate on test and write the run directory

    Writes config.json, metrics.csv, checkpoint.json, record.json and, when a
    test manifest is given, eval_report.json and pr_curves.csv.
    """
    cfg = config if isinstance(config, TrainConfig) else TrainConfig.from_config(config, require_data=True)
    if cfg.data is None:
        raise ConfigValidationError('data: required')
    train_set = load_manifest(cfg.data['train'])
    val_set = load_manifest(cfg.data['val']) if cfg.data.get('val') else None
    test_set = load_manifest(cfg.data['test']) if cfg.data.get('test') else None

    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, 'config.json'), cfg.to_document(), indent=2)
    trainer = Trainer(cfg, train_set, val_set)
    params, record = trainer.fit()
    record.regime = _regime_label(cfg, train_set)

    if test_set is not None:
        try:
            report = evaluate(params, test_set, filter_fully_labeled=True, histogram_bins=20)
        except EvaluationError as e:
            logger.warning(f'test evaluation skipped reason="{e}"')
        else:
            write_eval_artifacts(report, out_dir)
            record.test = report.to_document()
            logger.info(f'test map={report.map:.4f} examples={report.n_examples_used}')

    write_metrics(os.path.join(out_dir, 'metrics.csv'), record)
    save_checkpoint(os.path.join(out_dir, 'checkpoint.json'), trainer)
    write_json(os.path.join(out_dir, 'record.json'), record.to_document(), indent=2)
    return record
