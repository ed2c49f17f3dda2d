"""Published hyperparameters per loss kind

Each preset maps a loss kind to config sections. Applying a preset only
fills keys the config does not set itself.
"""
from copy import deepcopy

from .exceptions import ConfigValidationError
from .utils import merge

LL = ('LLR', 'LLCt', 'LLCp')
# large-loss variants train the output layer 10x faster
LL_MODEL = {'last_layer_lr_mult': 10.0}


def _target_only(lr, gamma, alpha_em, deltas):
    table = {
        'BCEFull': {},
        'AN': {},
        'WAN': {'loss': {'gamma': gamma}},
        'LS': {'loss': {'eps_ls': 0.1}},
        'ROLE': {'loss': {'lambda_role': 1.0}},
        'EM': {'loss': {'alpha_em': alpha_em}},
    }
    for kind, delta in zip(LL, deltas):
        table[kind] = {'loss': {'delta_rel': delta}, 'model': dict(LL_MODEL)}
    for entry in table.values():
        entry.setdefault('train', {})['base_lr'] = lr
    return table


def _with_priors(lr, rows, deltas):
    """rows: kind -> (loss hyperparameters, a, b)"""
    table = {}
    for kind, (values, a, b) in rows.items():
        table[kind] = {
            'loss': dict(values, a=a, b=b),
            'train': {'base_lr': lr},
        }
    for kind, delta in zip(LL, deltas):
        table[kind] = {
            'loss': {'delta_rel': delta},
            'train': {'base_lr': lr},
            'model': dict(LL_MODEL),
        }
    return table


def _with_reg(base, rows):
    """rows: kind -> (reg alpha, reg eps)"""
    table = deepcopy(base)
    for kind, (alpha, eps) in rows.items():
        table[kind]['reg'] = {'kind': 'rp', 'alpha': alpha, 'eps_ema': eps}
    return table


COCO_TARGET_ONLY = _target_only(1e-5, 1 / 79, 0.1, (0.4, 0.2, 0.2))
L48_TARGET_ONLY = _target_only(1e-4, 1 / 99, 0.2, (0.1, 0.1, 0.1))

PRESETS = {
    'coco-targetonly': COCO_TARGET_ONLY,
    'l48-targetonly': L48_TARGET_ONLY,
    'l48-reg': _with_reg(
        L48_TARGET_ONLY,
        {
            'BCEFull': (1e-1, 1e-2),
            'AN': (1e-1, 1e-3),
            'WAN': (1e-2, 1e-3),
            'LS': (1e-2, 1e-3),
            'ROLE': (1e-1, 1e-4),
            'EM': (1e-1, 1e-4),
            'LLR': (1e-1, 1e-2),
            'LLCt': (1e-2, 1e-2),
            'LLCp': (1e-2, 1e-4),
        },
    ),
    'coco-geo': _with_priors(
        1e-5,
        {
            'WAN': ({'gamma': 0.1}, 0, 0.01),
            'LS': ({'eps_ls': 0.2}, 0, 0.05),
            'ROLE': ({'lambda_role': 0.1}, 0, 0.01),
            'EM': ({'alpha_em': 0.1}, 1, 0.01),
        },
        (0.4, 0.2, 0.2),
    ),
    'coco-checklist': _with_priors(
        1e-5,
        {
            'WAN': ({'gamma': 0.1}, 1, 0.01),
            'LS': ({'eps_ls': 0.1}, 1, 0.5),
            'ROLE': ({'lambda_role': 1.0}, 1, 1.0),
            'EM': ({'alpha_em': 0.1}, 1, 0.02),
        },
        (0.4, 0.2, 0.2),
    ),
    'l48-geo': _with_priors(
        1e-4,
        {
            'WAN': ({'gamma': 0.05}, 1, 0.5),
            'LS': ({'eps_ls': 0.1}, 1, 0.2),
            'ROLE': ({'lambda_role': 0.5}, 0, 0.05),
            'EM': ({'alpha_em': 0.1}, 0, 0.01),
        },
        (0.1, 0.1, 0.1),
    ),
    'l48-checklist': _with_priors(
        1e-4,
        {
            'WAN': ({'gamma': 1 / 99}, 0, 0.5),
            'LS': ({'eps_ls': 0.1}, 1, 1.0),
            'ROLE': ({'lambda_role': 2.0}, 0, 0.05),
            'EM': ({'alpha_em': 0.02}, 1, 0.01),
        },
        (0.1, 0.1, 0.1),
    ),
}

# WAN converges slower on the asset benchmark
for _name, _table in PRESETS.items():
    if _name.startswith('l48-') and 'WAN' in _table:
        _table['WAN'].setdefault('train', {})['epochs'] = 20


def preset_values(name, kind):
    """Config sections published for a loss kind under a preset"""
    if name not in PRESETS:
        choices = ', '.join(sorted(PRESETS))
        raise ConfigValidationError(f'loss.preset: unknown preset "{name}" (expecting one of {choices})')
    table = PRESETS[name]
    if kind not in table:
        raise ConfigValidationError(f'loss.preset: preset "{name}" has no entry for {kind}')
    return deepcopy(table[kind])


def apply_preset(config):
    """Fill unset keys of a raw experiment config from its loss.preset"""
    config = deepcopy(config or {})
    loss = config.get('loss') or {}
    name = loss.get('preset')
    if not name:
        return config
    values = preset_values(name, loss.get('kind', 'AN'))
    # explicit config keys win over the preset
    return merge(config, values)
