import numpy as np

from pyspml.labelspace import (
    AssetRecord,
    ClipRecord,
    Dataset,
    DatasetMeta,
    TriStateLabelVector,
)


def manifest_doc(M=3, D=2):
    """Minimal manifest: one asset with two clips"""
    return {
        "meta": {"M": M, "D": D, "class_names": [f"c{i}" for i in range(M)]},
        "assets": [
            {
                "asset_id": 0,
                "target_class": 1,
                "possible_mask": [True] * M,
                "observed_mask": [True] * M,
            }
        ],
        "clips": [
            {
                "clip_id": 10,
                "asset_id": 0,
                "order_index": 0,
                "features": [0.5] * D,
                "labels": [-1, 1, -1][:M] + [-1] * (M - 3),
            },
            {
                "clip_id": 11,
                "asset_id": 0,
                "order_index": 1,
                "features": [-0.5] * D,
                "labels": [0, 1, 1][:M] + [-1] * (M - 3),
            },
        ],
    }


def flat_dataset(labels, features=None, regime=None):
    """Asset-free dataset from a label matrix"""
    labels = np.asarray(labels)
    N, M = labels.shape
    if features is None:
        features = np.zeros((N, 2))
    features = np.asarray(features, dtype=np.float64)
    clips = [
        ClipRecord(
            clip_id=i,
            asset_id=None,
            order_index=0,
            features=tuple(features[i].tolist()),
            labels=TriStateLabelVector.from_array(labels[i]),
        )
        for i in range(N)
    ]
    meta = DatasetMeta(
        M=M,
        D=features.shape[1],
        class_names=tuple(f"c{c}" for c in range(M)),
        regime=regime,
    )
    return Dataset(meta, (), tuple(clips))


def asset_dataset(assets, M, D=2, seed=0):
    """Asset dataset from [(target, possible, observed, [label rows])]"""
    rng = np.random.default_rng(seed)
    records, clips = [], []
    clip_id = 0
    for a, (target, possible, observed, rows) in enumerate(assets):
        ids = []
        for j, row in enumerate(rows):
            clips.append(
                ClipRecord(
                    clip_id=clip_id,
                    asset_id=a,
                    order_index=j,
                    features=tuple(rng.normal(size=D).tolist()),
                    labels=TriStateLabelVector.from_array(row),
                )
            )
            ids.append(clip_id)
            clip_id += 1
        records.append(
            AssetRecord(
                asset_id=a,
                target_class=target,
                clip_ids=tuple(ids),
                possible_mask=tuple(possible),
                observed_mask=tuple(observed),
            )
        )
    meta = DatasetMeta(M=M, D=D, class_names=tuple(f"c{c}" for c in range(M)))
    return Dataset(meta, tuple(records), tuple(clips))


def separable_dataset(n=64, seed=0):
    """Two linearly separable classes, fully labelled"""
    rng = np.random.default_rng(seed)
    side = rng.random(n) < 0.5
    features = rng.normal(size=(n, 2)) + np.where(side, 3.0, -3.0)[:, None]
    labels = np.stack([side, ~side], axis=1).astype(np.int8)
    return flat_dataset(labels, features)


def brute_force_ap(scores, labels):
    """AP by enumerating every distinct threshold with a naive counter"""
    scores = list(scores)
    labels = list(labels)
    total = sum(labels)
    previous_recall = 0.0
    ap = 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        pp = sum(1 for s in scores if s >= t)
        recall = tp / total
        ap += (recall - previous_recall) * (tp / pp)
        previous_recall = recall
    return ap
