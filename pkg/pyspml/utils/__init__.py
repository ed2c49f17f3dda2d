import json

import numpy as np


def set_dict(target, template, value):
    parts = template.split(".") if isinstance(template, str) else template
    num_parts = len(parts)
    for i, part in enumerate(parts):
        if part not in target:
            target[part] = {}
        if i == num_parts - 1:
            target[part] = value
        else:
            target = target[part]


def merge(source, dest):
    """Deep-merge source into dest (source wins)"""
    for key, value in source.items():
        if isinstance(value, dict):
            node = dest.setdefault(key, {})
            if not isinstance(node, dict):
                node = dest[key] = {}
            merge(value, node)
        else:
            dest[key] = value

    return dest


def coerce_value(value, singletons=True):
    """Try to coerce to boolean, null, integer, float"""
    if singletons:
        # coerce to singleton values: boolean/null

        lower = value.lower()
        if lower == "true":
            return True

        if lower == "false":
            return False

        if lower == "null":
            return None

    try:
        value = int(value)
    except ValueError:
        pass
    else:
        return value

    try:
        value = float(value)
    except ValueError:
        pass
    else:
        return value

    if value.startswith("[") or value.startswith("{"):
        # inline JSON, e.g. model.dims=[64,128,20]
        try:
            return json.loads(value)
        except ValueError:
            pass

    return value


def parse_overrides(pairs):
    """Turn ["train.epochs=3", "loss.kind=AN"] into a nested dict"""
    result = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f'override "{pair}" is not of the form key=value')
        key, value = pair.split("=", 1)
        set_dict(result, key.strip(), coerce_value(value.strip()))
    return result


def make_rng(seed, *keys):
    """Seeded generator for an independent stream

    Streams are derived by seed-splitting, so
    make_rng(seed, asset) does not depend on the order in which
    other streams were consumed.
    """
    entropy = [int(seed)] + [int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def to_json(value, indent=None):
    """Canonical JSON: insertion-ordered keys, exact float repr, UTF-8 safe"""
    return json.dumps(
        value,
        indent=indent,
        ensure_ascii=False,
        allow_nan=True,
        separators=(",", ": ") if indent else (",", ":"),
    )


def write_json(path, value, indent=None):
    with open(path, "w", encoding="utf-8") as f:
        f.write(to_json(value, indent=indent))
        f.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
