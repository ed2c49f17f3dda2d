"""Tri-state multi-label datasets with asset/clip structure"""
import logging
from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import cached_property
from typing import Optional, Tuple, Union

import numpy as np

from .conf import settings
from .exceptions import (
    ConfigValidationError,
    LabelError,
    ManifestReferenceError,
    ManifestValidationError,
    SplitError,
)
from .schemas import AssetSchema, ClipSchema, MetaSchema, resolve
from .utils import make_rng, read_json, write_json

logger = logging.getLogger(__name__)

Id = Union[str, int]


class LabelState(IntEnum):
    POSITIVE = 1
    NEGATIVE = 0
    UNKNOWN = -1


def id_key(value):
    """Sort key for ids that may mix integers and strings"""
    if isinstance(value, int):
        return (0, value, '')
    return (1, 0, str(value))


@dataclass(frozen=True)
class TriStateLabelVector:
    states: Tuple[int, ...]

    def __post_init__(self):
        states = tuple(int(s) for s in self.states)
        for c, s in enumerate(states):
            if s not in (1, 0, -1):
                raise LabelError(f'class {c}: invalid label state {s}')
        object.__setattr__(self, 'states', states)

    @classmethod
    def unknown(cls, M):
        return cls((LabelState.UNKNOWN,) * M)

    @classmethod
    def from_array(cls, values):
        return cls(tuple(int(v) for v in np.asarray(values).tolist()))

    def __len__(self):
        return len(self.states)

    def __getitem__(self, c):
        return LabelState(self.states[c])

    @property
    def M(self):
        return len(self.states)

    @property
    def positives(self):
        return tuple(c for c, s in enumerate(self.states) if s == 1)

    @property
    def negatives(self):
        return tuple(c for c, s in enumerate(self.states) if s == 0)

    @property
    def unknowns(self):
        return tuple(c for c, s in enumerate(self.states) if s == -1)

    def counts(self):
        """(positives, negatives, unknowns); always sums to M"""
        return (
            self.states.count(1),
            self.states.count(0),
            self.states.count(-1),
        )

    @property
    def fully_labeled(self):
        return -1 not in self.states

    def to_array(self):
        return np.array(self.states, dtype=np.int8)


@dataclass(frozen=True)
class BoxAnnotation:
    class_id: int
    t_start: float
    t_end: float
    status_hint: Optional[str] = None

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise LabelError(
                f'box of class {self.class_id}: t_start ({self.t_start}) '
                f'must be before t_end ({self.t_end})'
            )
        if self.status_hint not in (None, 'active', 'ignore'):
            raise LabelError(f'box status_hint must be active or ignore, got {self.status_hint}')


@dataclass(frozen=True)
class ClipRecord:
    clip_id: Id
    asset_id: Optional[Id]
    order_index: int
    features: Tuple[float, ...]
    labels: TriStateLabelVector

    @property
    def fully_labeled(self):
        return self.labels.fully_labeled


@dataclass(frozen=True)
class AssetRecord:
    asset_id: Id
    target_class: int
    clip_ids: Tuple[Id, ...]
    possible_mask: Tuple[bool, ...]
    observed_mask: Tuple[bool, ...]


@dataclass(frozen=True)
class DatasetMeta:
    M: int
    D: int
    class_names: Tuple[str, ...]
    split: str = 'train'
    regime: Optional[str] = None

    def __post_init__(self):
        if self.M < 2:
            raise ManifestValidationError(f'meta.M: expecting at least 2 classes, got {self.M}')
        if len(self.class_names) != self.M:
            raise ManifestValidationError(
                f'meta.class_names: expecting {self.M} names, got {len(self.class_names)}'
            )


@dataclass(frozen=True)
class Dataset:
    """meta, assets and clips of one split, with cached matrix views

    Assets are ordered by asset_id and clips by clip_id.
    A dataset without assets is flat (COCO-style images).
    """
    meta: DatasetMeta
    assets: Tuple[AssetRecord, ...] = field(default=())
    clips: Tuple[ClipRecord, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(
            self, 'assets', tuple(sorted(self.assets, key=lambda a: id_key(a.asset_id)))
        )
        object.__setattr__(
            self, 'clips', tuple(sorted(self.clips, key=lambda c: id_key(c.clip_id)))
        )
        self._check()

    def _check(self):
        M, D = self.meta.M, self.meta.D
        clip_ids = set()
        for clip in self.clips:
            if clip.clip_id in clip_ids:
                raise ManifestValidationError(f'clip {clip.clip_id}: duplicate clip_id')
            clip_ids.add(clip.clip_id)
            if len(clip.labels) != M:
                raise ManifestValidationError(
                    f'clip {clip.clip_id}: labels has length {len(clip.labels)}, expected {M}'
                )
            if len(clip.features) != D:
                raise ManifestValidationError(
                    f'clip {clip.clip_id}: features has dimension {len(clip.features)}, expected {D}'
                )

        by_asset = {}
        for clip in self.clips:
            if clip.asset_id is None:
                continue
            if clip.asset_id not in self.asset_by_id:
                raise ManifestReferenceError(
                    f'clip {clip.clip_id}: unknown asset_id {clip.asset_id}'
                )
            orders = by_asset.setdefault(clip.asset_id, set())
            if clip.order_index in orders:
                raise ManifestValidationError(
                    f'clip {clip.clip_id}: order_index {clip.order_index} '
                    f'is not unique within asset {clip.asset_id}'
                )
            orders.add(clip.order_index)

        for asset in self.assets:
            if not 0 <= asset.target_class < M:
                raise ManifestValidationError(
                    f'asset {asset.asset_id}: target_class {asset.target_class} not in [0, {M})'
                )
            if len(asset.possible_mask) != M or len(asset.observed_mask) != M:
                raise ManifestValidationError(
                    f'asset {asset.asset_id}: masks must have length {M}'
                )
            for clip_id in asset.clip_ids:
                if clip_id not in clip_ids:
                    raise ManifestReferenceError(
                        f'asset {asset.asset_id}: unknown clip_id {clip_id}'
                    )

    def __len__(self):
        return len(self.clips)

    @property
    def is_flat(self):
        return not self.assets

    @cached_property
    def asset_by_id(self):
        return {asset.asset_id: asset for asset in self.assets}

    @cached_property
    def clip_index(self):
        return {clip.clip_id: i for i, clip in enumerate(self.clips)}

    @cached_property
    def features(self):
        if not self.clips:
            return np.zeros((0, self.meta.D))
        matrix = np.array([clip.features for clip in self.clips], dtype=np.float64)
        matrix.setflags(write=False)
        return matrix

    @cached_property
    def label_matrix(self):
        if not self.clips:
            return np.zeros((0, self.meta.M), dtype=np.int8)
        matrix = np.array([clip.labels.states for clip in self.clips], dtype=np.int8)
        matrix.setflags(write=False)
        return matrix

    @cached_property
    def asset_rows(self):
        """Index into self.assets for every clip (-1 for flat clips)"""
        positions = {asset.asset_id: i for i, asset in enumerate(self.assets)}
        return np.array(
            [positions.get(clip.asset_id, -1) for clip in self.clips], dtype=np.int64
        )

    @cached_property
    def order_indices(self):
        return np.array([clip.order_index for clip in self.clips], dtype=np.int64)

    @cached_property
    def fully_labeled(self):
        return np.all(self.label_matrix != LabelState.UNKNOWN, axis=1)

    def with_labels(self, matrix, **meta):
        """Copy of this dataset with every clip relabelled from an (N, M) matrix"""
        matrix = np.asarray(matrix)
        if matrix.shape != (len(self.clips), self.meta.M):
            raise ManifestValidationError(
                f'label matrix has shape {matrix.shape}, '
                f'expected {(len(self.clips), self.meta.M)}'
            )
        clips = [
            replace(clip, labels=TriStateLabelVector.from_array(row))
            for clip, row in zip(self.clips, matrix)
        ]
        return Dataset(replace(self.meta, **meta), self.assets, tuple(clips))

    def with_meta(self, **meta):
        return Dataset(replace(self.meta, **meta), self.assets, self.clips)

    def subset(self, rows, **meta):
        """Keep clips at the given row positions; assets left without clips are dropped"""
        rows = sorted(set(int(r) for r in rows))
        clips = tuple(self.clips[r] for r in rows)
        kept = {clip.clip_id for clip in clips}
        assets = []
        for asset in self.assets:
            clip_ids = tuple(c for c in asset.clip_ids if c in kept)
            if clip_ids:
                assets.append(replace(asset, clip_ids=clip_ids))
        return Dataset(replace(self.meta, **meta), tuple(assets), clips)


def _resolve_record(schema, raw, index, label):
    try:
        return resolve(schema, raw, path=f'{schema.name}[{index}]')
    except ConfigValidationError as e:
        raise ManifestValidationError(f'{e} ({label})')


def load_manifest(path):
    """Load and validate a manifest

    Returns:
        Dataset bundling (meta, assets, clips), ordered by id
    """
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise ManifestValidationError(f'{path}: manifest must be a JSON object')
    for key in ('meta', 'assets', 'clips'):
        if key not in doc:
            raise ManifestValidationError(f'{path}: missing "{key}"')

    raw_meta = _resolve_record(MetaSchema, doc['meta'], 0, 'meta')
    meta = DatasetMeta(
        M=raw_meta['M'],
        D=raw_meta['D'],
        class_names=tuple(raw_meta['class_names']),
        split=raw_meta['split'],
        regime=raw_meta['regime'],
    )
    M = meta.M

    raw_clips = []
    for i, raw in enumerate(doc['clips']):
        clip_id = raw.get('clip_id') if isinstance(raw, dict) else None
        record = _resolve_record(ClipSchema, raw, i, f'clip {clip_id}')
        if len(record['labels']) != M:
            raise ManifestValidationError(
                f'clips[{i}].labels: clip {clip_id} has {len(record["labels"])} labels, expected {M}'
            )
        raw_clips.append(record)

    clips_by_asset = {}
    for record in raw_clips:
        if record['asset_id'] is not None:
            clips_by_asset.setdefault(record['asset_id'], []).append(record)

    assets = []
    for i, raw in enumerate(doc['assets']):
        asset_id = raw.get('asset_id') if isinstance(raw, dict) else None
        record = _resolve_record(AssetSchema, raw, i, f'asset {asset_id}')
        target = record['target_class']
        if target >= M:
            raise ManifestValidationError(
                f'assets[{i}].target_class: {target} not in [0, {M}) (asset {asset_id})'
            )
        if len(record['possible_mask']) != M or len(record['observed_mask']) != M:
            raise ManifestValidationError(
                f'assets[{i}]: masks must have length {M} (asset {asset_id})'
            )
        if not record['possible_mask'][target]:
            raise ManifestValidationError(
                f'assets[{i}].possible_mask: target class {target} marked impossible (asset {asset_id})'
            )
        members = sorted(clips_by_asset.get(asset_id, []), key=lambda r: r['order_index'])
        assets.append(AssetRecord(
            asset_id=asset_id,
            target_class=target,
            clip_ids=tuple(r['clip_id'] for r in members),
            possible_mask=tuple(record['possible_mask']),
            observed_mask=tuple(record['observed_mask']),
        ))

    clips = [
        ClipRecord(
            clip_id=r['clip_id'],
            asset_id=r['asset_id'],
            order_index=r['order_index'],
            features=tuple(float(x) for x in r['features']),
            labels=TriStateLabelVector(tuple(r['labels'])),
        )
        for r in raw_clips
    ]
    dataset = Dataset(meta, tuple(assets), tuple(clips))
    logger.debug(f'loaded manifest path={path} clips={len(dataset)} assets={len(dataset.assets)}')
    return dataset


def manifest_document(dataset):
    meta = dataset.meta
    return {
        'meta': {
            'M': meta.M,
            'D': meta.D,
            'class_names': list(meta.class_names),
            'split': meta.split,
            'regime': meta.regime,
        },
        'assets': [
            {
                'asset_id': asset.asset_id,
                'target_class': asset.target_class,
                'possible_mask': list(asset.possible_mask),
                'observed_mask': list(asset.observed_mask),
            }
            for asset in dataset.assets
        ],
        'clips': [
            {
                'clip_id': clip.clip_id,
                'asset_id': clip.asset_id,
                'order_index': clip.order_index,
                'features': [float(x) for x in clip.features],
                'labels': list(clip.labels.states),
            }
            for clip in dataset.clips
        ],
    }


def save_manifest(path, dataset):
    write_json(path, manifest_document(dataset))


def box_is_ignored(box, clip_duration):
    """Mostly-truncated rule: long boxes confined to an edge window mark nothing"""
    start = max(0.0, box.t_start)
    end = min(clip_duration, box.t_end)
    duration = end - start
    if duration <= settings.BOX_MIN_DURATION:
        return False
    edge = settings.BOX_EDGE_WINDOW
    return end <= edge or start >= clip_duration - edge


def clip_labels_from_boxes(boxes, clip_duration=None, M=None):
    """Presence labels of one clip from its time boxes

    A class is Positive if any of its boxes overlaps the window and is
    not mostly truncated; every other class is Unknown.
    """
    if clip_duration is None:
        clip_duration = settings.CLIP_DURATION
    if clip_duration <= 0:
        raise LabelError(f'clip_duration must be positive, got {clip_duration}')
    if M is None:
        raise LabelError('class count M is required')

    states = [LabelState.UNKNOWN] * M
    for box in boxes:
        if not box.t_start < box.t_end:
            raise LabelError(
                f'box of class {box.class_id}: t_start ({box.t_start}) must be before t_end ({box.t_end})'
            )
        if not 0 <= box.class_id < M:
            raise LabelError(f'box class {box.class_id} not in [0, {M})')
        if box.status_hint == 'ignore':
            continue
        if box.t_end <= 0 or box.t_start >= clip_duration:
            # outside the window
            continue
        if box.status_hint == 'active' or not box_is_ignored(box, clip_duration):
            states[box.class_id] = LabelState.POSITIVE
    return TriStateLabelVector(tuple(states))


def _split_counts(n, fractions):
    _, f_val, f_test = fractions
    n_val = max(1, round(f_val * n)) if f_val > 0 else 0
    n_test = max(1, round(f_test * n)) if f_test > 0 else 0
    return n - n_val - n_test, n_val, n_test


def split_dataset(dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Asset-level split stratified by target class

    Returns:
        (train, val, test) datasets; all clips of an asset share a split
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise SplitError(f'fractions must be three non-negative values summing to 1, got {fractions}')

    names = ('train', 'val', 'test')
    chosen = {name: [] for name in names}

    if dataset.is_flat:
        rows = make_rng(seed).permutation(len(dataset))
        n_train, n_val, _ = _split_counts(len(rows), fractions)
        chosen['train'] = rows[:n_train].tolist()
        chosen['val'] = rows[n_train:n_train + n_val].tolist()
        chosen['test'] = rows[n_train + n_val:].tolist()
        return tuple(dataset.subset(chosen[name], split=name) for name in names)

    by_class = {}
    for asset in dataset.assets:
        by_class.setdefault(asset.target_class, []).append(asset)

    assigned = {}
    for target in sorted(by_class):
        assets = by_class[target]
        order = make_rng(seed, target).permutation(len(assets))
        counts = _split_counts(len(assets), fractions)
        if any(count < 1 for count, f in zip(counts, fractions) if f > 0):
            raise SplitError(
                f'class {target} has {len(assets)} assets, too few to populate every split'
            )
        start = 0
        for name, count in zip(names, counts):
            for i in order[start:start + count]:
                assigned[assets[i].asset_id] = name
            start += count

    for row, clip in enumerate(dataset.clips):
        chosen[assigned[clip.asset_id]].append(row)
    return tuple(dataset.subset(chosen[name], split=name) for name in names)
