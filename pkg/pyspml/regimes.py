"""Data regimes (full, target-only, geo, checklist) and synthetic benchmarks"""
import logging
import math
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from sklearn.linear_model import Ridge

from .conf import settings
from .exceptions import CalibrationError, ConfigValidationError, RegimeError
from .labelspace import (
    AssetRecord,
    ClipRecord,
    Dataset,
    DatasetMeta,
    LabelState,
    TriStateLabelVector,
)
from .schemas import GeneratorSchema, PriorSimSchema, resolve
from .utils import make_rng

logger = logging.getLogger(__name__)

# stream tags keep the seeded streams of different stages apart
STREAM_STRUCTURE = 1
STREAM_ASSET = 2
STREAM_TARGET_ONLY = 3
STREAM_CONTEXT = 4
STREAM_FIT = 5

POSITIVE, NEGATIVE, UNKNOWN = int(LabelState.POSITIVE), int(LabelState.NEGATIVE), int(LabelState.UNKNOWN)


class RegimeKind(str, Enum):
    FULL = 'Full'
    TARGET_ONLY = 'TargetOnly'
    GEO = 'Geo'
    CHECKLIST = 'Checklist'


@dataclass(frozen=True)
class GeneratorConfig:
    M: int = 100
    A: int = 1000
    clips_per_asset: Tuple[int, int] = (4, 12)
    D: int = 64
    p_bg: float = 0.28
    confusable_pairs: int = 0
    confusable_offset: float = 0.25
    regions: int = 4
    species_per_region: Optional[int] = None
    background_species: Optional[int] = None
    checklist_extra: Optional[float] = None
    noise_sigma: float = 0.5
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'clips_per_asset', tuple(self.clips_per_asset))
        object.__setattr__(self, 'split', tuple(self.split))
        if not 0 <= self.p_bg <= 1:
            raise ConfigValidationError(f'generator.p_bg must be in [0, 1], got {self.p_bg}')
        if self.species_per_region is not None and self.species_per_region > self.M:
            raise ConfigValidationError(
                f'generator.species_per_region ({self.species_per_region}) exceeds M ({self.M})'
            )
        if self.confusable_pairs > self.M // 2:
            raise ConfigValidationError(
                f'generator.confusable_pairs ({self.confusable_pairs}) exceeds M/2'
            )
        low, high = self.clips_per_asset
        if low > high:
            raise ConfigValidationError(f'generator.clips_per_asset: {low} > {high}')

    @classmethod
    def from_config(cls, values, **overrides):
        values = resolve(GeneratorSchema, dict(values or {}, **overrides))
        return cls(**values)

    @property
    def region_size(self):
        if self.species_per_region is not None:
            return self.species_per_region
        return max(1, min(self.M, round(0.58 * self.M)))

    @property
    def community_size(self):
        if self.background_species is not None:
            return self.background_species
        return max(1, round(0.04 * self.M))

    @property
    def checklist_mean(self):
        if self.checklist_extra is not None:
            return self.checklist_extra
        return 0.16 * self.M

    def as_dict(self):
        result = {}
        for f in fields(self):
            value = getattr(self, f.name)
            result[f.name] = list(value) if isinstance(value, tuple) else value
        return result


@dataclass(frozen=True)
class PriorSimConfig:
    target_known_negative_fraction: float = 0.45
    fit_fraction: float = 0.10
    context_dim: int = 32
    ridge_lambda: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.fit_fraction <= 1:
            raise ConfigValidationError(f'prior.fit_fraction must be in (0, 1], got {self.fit_fraction}')
        if not 0 < self.target_known_negative_fraction < 1:
            raise ConfigValidationError('prior.target_known_negative_fraction must be in (0, 1)')

    @classmethod
    def from_config(cls, values, **overrides):
        return cls(**resolve(PriorSimSchema, dict(values or {}, **overrides)))


@dataclass(frozen=True)
class SyntheticTruth:
    """Hidden structure behind a generated dataset"""
    prototypes: np.ndarray
    home_region: Tuple[int, ...]
    regions: Tuple[Tuple[int, ...], ...]
    confusable: Tuple[Tuple[int, int], ...]
    asset_region: Tuple[int, ...]
    communities: Tuple[Tuple[int, ...], ...]
    full_labels: np.ndarray

    def to_document(self):
        return {
            'prototypes': self.prototypes.tolist(),
            'home_region': list(self.home_region),
            'regions': [list(r) for r in self.regions],
            'confusable': [list(p) for p in self.confusable],
            'asset_region': list(self.asset_region),
            'communities': [list(c) for c in self.communities],
        }


@dataclass(frozen=True)
class RegimeStats:
    n_examples: int
    mean_pos: float
    mean_neg: float
    mean_unk: float
    min_pos: int
    max_pos: int
    min_neg: int
    max_neg: int
    min_unk: int
    max_unk: int

    columns = (
        'split', 'regime', 'mean_pos', 'mean_neg', 'mean_unk',
        'min_pos', 'max_pos', 'min_neg', 'max_neg', 'min_unk', 'max_unk',
    )

    def as_row(self, split, regime):
        return [split, regime] + [getattr(self, c) for c in self.columns[2:]]


class RandomProjectionContext:
    """Default context provider: a seeded random projection of clip features"""

    def __init__(self, context_dim, seed=0):
        self.context_dim = context_dim
        self.seed = seed

    def __call__(self, dataset):
        D = dataset.meta.D
        rng = make_rng(self.seed, STREAM_CONTEXT)
        projection = rng.standard_normal((D, self.context_dim)) / math.sqrt(D)
        return dataset.features @ projection


def _assign_regions(cfg, rng):
    M, R = cfg.M, cfg.regions
    home = np.empty(M, dtype=np.int64)
    home[rng.permutation(M)] = np.arange(M) % R
    partner = {}
    for i in range(cfg.confusable_pairs):
        a, b = 2 * i, 2 * i + 1
        partner[a], partner[b] = b, a
        if R > 1 and home[a] == home[b]:
            # look-alikes live apart
            home[b] = (home[a] + 1) % R

    regions = []
    for r in range(R):
        members = [c for c in range(M) if home[c] == r]
        partners = {partner[c] for c in members if c in partner}
        others = [c for c in range(M) if c not in members and c not in partners]
        need = cfg.region_size - len(members)
        if need > 0 and others:
            fill = rng.choice(others, size=min(need, len(others)), replace=False)
            members.extend(int(c) for c in fill)
            need -= len(fill)
        if need > 0:
            # region wider than the non-partner pool
            members.extend(sorted(partners - set(members))[:need])
        if not members:
            raise RegimeError(f'region {r} has zero species')
        regions.append(tuple(sorted(members)))
    return tuple(int(h) for h in home), tuple(regions)


def _prototypes(cfg, rng):
    prototypes = rng.standard_normal((cfg.M, cfg.D))
    for i in range(cfg.confusable_pairs):
        a, b = 2 * i, 2 * i + 1
        prototypes[b] = prototypes[a] + cfg.confusable_offset * rng.standard_normal(cfg.D)
    return prototypes


def gen_synthetic_assets(cfg):
    """Generate an asset-structured, fully labelled dataset

    Returns:
        (dataset, truth): the Full-regime dataset and its hidden structure
    """
    M = cfg.M
    rng = make_rng(cfg.seed, STREAM_STRUCTURE)
    home, regions = _assign_regions(cfg, rng)
    prototypes = _prototypes(cfg, rng)
    low, high = cfg.clips_per_asset

    assets, clips, rows = [], [], []
    asset_region, communities = [], []
    clip_id = 0
    for a in range(cfg.A):
        arng = make_rng(cfg.seed, STREAM_ASSET, a)
        r = int(arng.integers(cfg.regions))
        species = np.array(regions[r])
        target = int(arng.choice(species))
        pool = species[species != target]
        size = min(cfg.community_size, len(pool))
        community = np.sort(arng.choice(pool, size=size, replace=False)) if size else np.array([], dtype=np.int64)
        n_clips = int(arng.integers(low, high + 1))
        present = arng.random((n_clips, len(community))) < cfg.p_bg

        clip_ids = []
        for j in range(n_clips):
            labels = np.full(M, NEGATIVE, dtype=np.int8)
            labels[target] = POSITIVE
            labels[community[present[j]]] = POSITIVE
            noise = cfg.noise_sigma * arng.standard_normal(cfg.D)
            features = prototypes[labels == POSITIVE].sum(axis=0) + noise
            clips.append(ClipRecord(
                clip_id=clip_id,
                asset_id=a,
                order_index=j,
                features=tuple(features.tolist()),
                labels=TriStateLabelVector.from_array(labels),
            ))
            rows.append(labels)
            clip_ids.append(clip_id)
            clip_id += 1

        observed = {target} | {int(c) for c in community}
        leftover = [int(c) for c in species if int(c) not in observed]
        n_extra = min(int(arng.poisson(cfg.checklist_mean)), len(leftover))
        if n_extra:
            observed |= {int(c) for c in arng.choice(leftover, size=n_extra, replace=False)}
        possible = set(int(c) for c in species)
        assets.append(AssetRecord(
            asset_id=a,
            target_class=target,
            clip_ids=tuple(clip_ids),
            possible_mask=tuple(c in possible for c in range(M)),
            observed_mask=tuple(c in observed for c in range(M)),
        ))
        asset_region.append(r)
        communities.append(tuple(int(c) for c in community))

    meta = DatasetMeta(
        M=M,
        D=cfg.D,
        class_names=tuple(f'class_{c:03d}' for c in range(M)),
        split='train',
        regime=RegimeKind.FULL.value,
    )
    dataset = Dataset(meta, tuple(assets), tuple(clips))
    truth = SyntheticTruth(
        prototypes=prototypes,
        home_region=home,
        regions=regions,
        confusable=tuple((2 * i, 2 * i + 1) for i in range(cfg.confusable_pairs)),
        asset_region=tuple(asset_region),
        communities=tuple(communities),
        full_labels=np.array(rows, dtype=np.int8).reshape(-1, M),
    )
    logger.info(
        f'generated assets={cfg.A} clips={len(dataset)} M={M} seed={cfg.seed}'
    )
    return dataset, truth


def flatten(dataset):
    """Drop the asset structure, keeping every clip as an independent example"""
    clips = tuple(replace(clip, asset_id=None, order_index=0) for clip in dataset.clips)
    return Dataset(dataset.meta, (), clips)


def make_target_only(dataset, seed=0):
    """Keep a single positive per example, everything else Unknown

    Asset data keeps only clips where the asset's target class is present;
    flat data samples one positive per image uniformly at random and drops
    images without any positive.
    """
    labels = dataset.label_matrix
    M = dataset.meta.M
    if dataset.is_flat:
        rng = make_rng(seed, STREAM_TARGET_ONLY)
        keep, chosen = [], []
        for row in range(len(dataset)):
            positives = np.flatnonzero(labels[row] == POSITIVE)
            if not len(positives):
                continue
            keep.append(row)
            chosen.append(int(positives[rng.integers(len(positives))]))
    else:
        targets = np.array([asset.target_class for asset in dataset.assets], dtype=np.int64)
        keep, chosen = [], []
        for row, asset_row in enumerate(dataset.asset_rows):
            if asset_row < 0:
                continue
            target = targets[asset_row]
            if labels[row, target] == POSITIVE:
                keep.append(row)
                chosen.append(int(target))

    subset = dataset.subset(keep)
    matrix = np.full((len(keep), M), UNKNOWN, dtype=np.int8)
    matrix[np.arange(len(keep)), chosen] = POSITIVE
    dropped = len(dataset) - len(keep)
    if dropped:
        logger.info(f'target-only dropped={dropped} kept={len(keep)}')
    return subset.with_labels(matrix, regime=RegimeKind.TARGET_ONLY.value)


def _apply_allowed(dataset, allowed, regime):
    if dataset.is_flat:
        raise RegimeError(f'{regime} prior requires asset metadata; dataset is flat')
    for asset, mask in zip(dataset.assets, allowed):
        if not mask[asset.target_class]:
            raise RegimeError(
                f'asset {asset.asset_id}: target class {asset.target_class} '
                f'is excluded by its {regime.lower()} metadata'
            )
    labels = dataset.label_matrix
    rows = dataset.asset_rows
    structured = rows >= 0
    per_clip = np.ones(labels.shape, dtype=bool)
    per_clip[structured] = allowed[rows[structured]]
    matrix = labels.copy()
    matrix[(labels == UNKNOWN) & ~per_clip] = NEGATIVE
    return dataset.with_labels(matrix, regime=regime)


def apply_geo_prior(dataset):
    """Classes outside an asset's possible set become Negative"""
    allowed = np.array([asset.possible_mask for asset in dataset.assets], dtype=bool)
    return _apply_allowed(dataset, allowed, RegimeKind.GEO.value)


def apply_checklist_prior(dataset):
    """Classes missing from the checklist (or outside the range) become Negative"""
    allowed = np.array(
        [np.logical_and(asset.possible_mask, asset.observed_mask) for asset in dataset.assets],
        dtype=bool,
    )
    return _apply_allowed(dataset, allowed, RegimeKind.CHECKLIST.value)


def apply_regime(dataset, kind, seed=0):
    kind = RegimeKind(kind)
    if kind is RegimeKind.FULL:
        return dataset.with_meta(regime=kind.value)
    target_only = make_target_only(dataset, seed=seed)
    if kind is RegimeKind.TARGET_ONLY:
        return target_only
    if kind is RegimeKind.GEO:
        return apply_geo_prior(target_only)
    return apply_checklist_prior(target_only)


def known_negative_fraction(dataset):
    labels = dataset.label_matrix
    if not labels.size:
        return 0.0
    return float(np.mean(labels == NEGATIVE))


def _align_full_labels(dataset, full_labels):
    if isinstance(full_labels, Dataset):
        index = full_labels.clip_index
        try:
            rows = [index[clip.clip_id] for clip in dataset.clips]
        except KeyError as e:
            raise RegimeError(f'hidden labels have no clip {e}')
        return full_labels.label_matrix[rows]
    full_labels = np.asarray(full_labels)
    if full_labels.shape != dataset.label_matrix.shape:
        raise RegimeError(
            f'hidden labels have shape {full_labels.shape}, expected {dataset.label_matrix.shape}'
        )
    return full_labels


def fit_context_scores(context, truth, cfg):
    """Ridge map from context vectors to label vectors, fit on a seeded subset"""
    N = len(context)
    rng = make_rng(cfg.seed, STREAM_FIT)
    n_fit = min(N, max(2, round(cfg.fit_fraction * N)))
    rows = np.sort(rng.choice(N, size=n_fit, replace=False))
    targets = (truth[rows] == POSITIVE).astype(np.float64)
    if math.isinf(cfg.ridge_lambda):
        # infinite shrinkage leaves only the intercept: class base rates
        return np.tile(targets.mean(axis=0), (N, 1))
    model = Ridge(alpha=cfg.ridge_lambda, fit_intercept=True)
    model.fit(context[rows], targets)
    return model.predict(context).reshape(N, -1)


def simulate_context_priors(flat_dataset, full_labels, cfg, context_provider=None):
    """Add negatives from context-predicted improbable classes

    Unknown entries are ranked by predicted score (ties by flat index) and
    a global threshold in that order is found by binary search so that the
    fraction of Negative entries matches the target; marked entries that are
    true positives are reverted to Unknown.
    """
    provider = context_provider or RandomProjectionContext(cfg.context_dim, cfg.seed)
    truth = _align_full_labels(flat_dataset, full_labels)
    labels = flat_dataset.label_matrix
    N, M = labels.shape
    if not N:
        raise RegimeError('cannot simulate priors on an empty dataset')

    context = np.asarray(provider(flat_dataset), dtype=np.float64)
    scores = fit_context_scores(context, truth, cfg)

    candidates = np.flatnonzero(labels.ravel() == UNKNOWN)
    order = candidates[np.lexsort((candidates, scores.ravel()[candidates]))]
    eligible = truth.ravel()[order] != POSITIVE
    existing = int(np.sum(labels == NEGATIVE))
    # negatives after marking the first k ranked candidates, k = 0..len(order)
    achieved = existing + np.concatenate([[0], np.cumsum(eligible)])
    total = N * M
    goal = cfg.target_known_negative_fraction * total
    k = int(np.searchsorted(achieved, goal))
    if k > len(order) or (k > 0 and goal - achieved[k - 1] < achieved[k] - goal):
        k -= 1
    fraction = achieved[k] / total
    tolerance = settings.THRESHOLD_TOLERANCE
    if abs(fraction - cfg.target_known_negative_fraction) > tolerance:
        raise CalibrationError(
            f'threshold search cannot bracket known-negative fraction '
            f'{cfg.target_known_negative_fraction:.3f} (closest {fraction:.3f})'
        )

    marked = order[:k]
    kept = marked[eligible[:k]]
    matrix = labels.copy().ravel()
    matrix[kept] = NEGATIVE
    threshold = float(scores.ravel()[marked[-1]]) if k else float('-inf')
    logger.info(
        f'context prior target={cfg.target_known_negative_fraction:.3f} '
        f'achieved={fraction:.4f} threshold={threshold:.6g} '
        f'reverted={k - len(kept)}'
    )
    return flat_dataset.with_labels(matrix.reshape(N, M), regime='ContextPrior')


def regime_stats(dataset):
    labels = dataset.label_matrix
    if not len(labels):
        return RegimeStats(0, 0.0, 0.0, 0.0, 0, 0, 0, 0, 0, 0)
    pos = np.sum(labels == POSITIVE, axis=1)
    neg = np.sum(labels == NEGATIVE, axis=1)
    unk = np.sum(labels == UNKNOWN, axis=1)
    return RegimeStats(
        n_examples=len(labels),
        mean_pos=float(pos.mean()),
        mean_neg=float(neg.mean()),
        mean_unk=float(unk.mean()),
        min_pos=int(pos.min()),
        max_pos=int(pos.max()),
        min_neg=int(neg.min()),
        max_neg=int(neg.max()),
        min_unk=int(unk.min()),
        max_unk=int(unk.max()),
    )
