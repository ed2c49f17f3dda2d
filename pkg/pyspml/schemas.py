from copy import deepcopy

from .exceptions import ConfigValidationError, TypeValidationError
from .utils.types import validate, describe_type


probability = {"type": "number", "minimum": 0, "maximum": 1}
positive_integer = {"type": "integer", "minimum": 1}
seed = {
    "type": {"type": "integer", "minimum": 0},
    "default": 0,
    "description": "Seed for every random stream of this section",
}
loss_kinds = ["BCEFull", "AN", "WAN", "LS", "ROLE", "EM", "LLR", "LLCt", "LLCp"]
regime_kinds = ["Full", "TargetOnly", "Geo", "Checklist"]


class MetaSchema:
    name = "meta"
    description = "Dataset-wide metadata of a manifest"
    fields = {
        "M": {"type": {"type": "integer", "minimum": 2}, "required": True},
        "D": {"type": positive_integer, "required": True},
        "class_names": {
            "type": {"type": "array", "items": "string"},
            "required": True,
        },
        "split": {
            "type": {"type": "string", "enum": ["train", "val", "test"]},
            "default": "train",
        },
        "regime": {"type": ["null", "string"], "default": None},
    }


class AssetSchema:
    name = "assets"
    description = "One recording: target class and metadata masks"
    fields = {
        "asset_id": {"type": ["string", "integer"], "required": True},
        "target_class": {"type": {"type": "integer", "minimum": 0}, "required": True},
        "possible_mask": {
            "type": {"type": "array", "items": "boolean"},
            "required": True,
        },
        "observed_mask": {
            "type": {"type": "array", "items": "boolean"},
            "required": True,
        },
    }


class ClipSchema:
    name = "clips"
    description = "One fixed-length window of an asset (or one flat example)"
    fields = {
        "clip_id": {"type": ["string", "integer"], "required": True},
        "asset_id": {"type": ["null", "string", "integer"], "default": None},
        "order_index": {"type": {"type": "integer", "minimum": 0}, "default": 0},
        "features": {
            "type": {"type": "array", "items": "number"},
            "required": True,
        },
        "labels": {
            "type": {"type": "array", "items": {"type": "integer", "enum": [1, 0, -1]}},
            "required": True,
        },
    }


class DataSchema:
    name = "data"
    description = "Manifests used by an experiment"
    fields = {
        "train": {
            "type": "string",
            "required": True,
            "description": "Training manifest (any regime)",
        },
        "val": {
            "type": ["null", "string"],
            "default": None,
            "description": "Validation manifest used for model selection",
        },
        "test": {
            "type": ["null", "string"],
            "default": None,
            "description": "Test manifest evaluated after training",
        },
        "regime": {
            "type": ["null", "string"],
            "default": None,
            "description": "Regime label used to group runs in reports "
            "(defaults to the training manifest's meta.regime)",
        },
    }


class ModelSchema:
    name = "model"
    description = "Multi-layer perceptron with a sigmoid head"
    fields = {
        "hidden": {
            "type": {"type": "array", "items": positive_integer},
            "default": [128],
            "description": "Hidden layer widths; [] is logistic regression",
        },
        "seed": seed,
        "last_layer_lr_mult": {
            "type": {"type": "number", "exclusiveMinimum": 0},
            "default": 1.0,
            "description": "Learning-rate multiplier of the output layer",
        },
    }


class LossSchema:
    name = "loss"
    description = "Single-positive multi-label loss and its hyperparameters"
    fields = {
        "kind": {
            "type": {"type": "string", "enum": loss_kinds},
            "default": "AN",
            "description": "Loss family",
        },
        "preset": {
            "type": ["null", "string"],
            "default": None,
            "description": "Named hyperparameter preset filling unset loss/reg/train keys",
        },
        "gamma": {
            "type": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "default": 1.0,
            "description": "WAN weight on unknown terms",
        },
        "eps_ls": {
            "type": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "default": 0.1,
            "description": "Label smoothing epsilon",
        },
        "alpha_em": {
            "type": {"type": "number", "exclusiveMinimum": 0},
            "default": 0.1,
            "description": "Entropy maximization weight",
        },
        "lambda_role": {
            "type": {"type": "number", "minimum": 0},
            "default": 1.0,
            "description": "ROLE expected-positive regularizer weight",
        },
        "expected_positives_k": {
            "type": positive_integer,
            "default": 1,
            "description": "ROLE expected number of positives per example",
        },
        "role_lr": {
            "type": {"type": "number", "exclusiveMinimum": 0},
            "default": 10.0,
            "description": "Step size of the ROLE label-estimate update",
        },
        "delta_rel": {
            "type": {"type": "number", "minimum": 0},
            "default": 0.1,
            "description": "Large-loss schedule, percent of batch losses per epoch",
        },
        "a": {
            "type": {"type": "integer", "enum": [0, 1]},
            "default": 1,
            "description": "Prior combinator: keep (1) or drop (0) unknown terms",
        },
        "b": {
            "type": {"type": "number", "minimum": 0},
            "default": 1.0,
            "description": "Prior combinator weight on known-negative BCE terms",
        },
    }


class RegSchema:
    name = "reg"
    description = "Asset-consistency regularization"
    fields = {
        "kind": {
            "type": {"type": "string", "enum": ["none", "rp", "re"]},
            "default": "none",
            "description": "none, rp (prediction EMA) or re (embedding EMA)",
        },
        "alpha": {
            "type": {"type": "number", "minimum": 0},
            "default": 0.1,
            "description": "Weight of the regularizer in the total objective",
        },
        "eps_ema": {
            "type": probability,
            "default": 1e-2,
            "description": "Moving-average rate of the prediction targets",
        },
        "eps_ema_embed": {
            "type": {"anyOf": [{"type": "null"}, probability]},
            "default": None,
            "description": "Moving-average rate of the embedding targets (defaults to eps_ema)",
        },
        "seed": seed,
    }


class TrainSchema:
    name = "train"
    description = "Optimization protocol"
    fields = {
        "epochs": {"type": positive_integer, "default": 10, "description": "Epochs"},
        "batch_size": {
            "type": positive_integer,
            "default": 16,
            "description": "Examples per batch",
        },
        "base_lr": {
            "type": {"type": "number", "exclusiveMinimum": 0},
            "default": 1e-3,
            "description": "Constant Adam learning rate",
        },
        "betas": {
            "type": {"type": "array", "items": probability, "minItems": 2, "maxItems": 2},
            "default": [0.9, 0.999],
            "description": "Adam moment decay rates",
        },
        "adam_eps": {
            "type": {"type": "number", "exclusiveMinimum": 0},
            "default": 1e-8,
            "description": "Adam denominator epsilon",
        },
        "seed": seed,
        "eval_every": {
            "type": positive_integer,
            "default": 1,
            "description": "Validation mAP every N epochs",
        },
        "metrics_log": {
            "type": ["null", "string"],
            "default": None,
            "description": "Optional CSV path appended with per-epoch metrics",
        },
    }


class GeneratorSchema:
    name = "generator"
    description = "Synthetic asset-structured benchmark"
    fields = {
        "M": {"type": {"type": "integer", "minimum": 2}, "default": 100},
        "A": {"type": positive_integer, "default": 1000, "description": "Assets"},
        "clips_per_asset": {
            "type": {"type": "array", "items": positive_integer, "minItems": 2, "maxItems": 2},
            "default": [4, 12],
            "description": "Inclusive range of clips per asset",
        },
        "D": {"type": positive_integer, "default": 64, "description": "Feature dimension"},
        "p_bg": {
            "type": probability,
            "default": 0.28,
            "description": "Per-clip presence probability of background species",
        },
        "confusable_pairs": {
            "type": {"type": "integer", "minimum": 0},
            "default": 0,
            "description": "Class pairs sharing a prototype up to a small offset",
        },
        "confusable_offset": {
            "type": {"type": "number", "minimum": 0},
            "default": 0.25,
            "description": "Offset scale separating confusable prototypes",
        },
        "regions": {"type": positive_integer, "default": 4},
        "species_per_region": {
            "type": {"anyOf": [{"type": "null"}, positive_integer]},
            "default": None,
            "description": "Species in each region (default 58% of M)",
        },
        "background_species": {
            "type": {"anyOf": [{"type": "null"}, {"type": "integer", "minimum": 0}]},
            "default": None,
            "description": "Background community size per asset (default 4% of M)",
        },
        "checklist_extra": {
            "type": {"anyOf": [{"type": "null"}, {"type": "number", "minimum": 0}]},
            "default": None,
            "description": "Mean extra non-vocalizing checklist species (default 16% of M)",
        },
        "noise_sigma": {"type": {"type": "number", "minimum": 0}, "default": 0.5},
        "split": {
            "type": {"type": "array", "items": probability, "minItems": 3, "maxItems": 3},
            "default": [0.8, 0.1, 0.1],
            "description": "Train/val/test asset fractions",
        },
        "seed": seed,
    }


class PriorSimSchema:
    name = "prior"
    description = "Simulated context priors for flat datasets"
    fields = {
        "target_known_negative_fraction": {
            "type": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "default": 0.45,
        },
        "fit_fraction": {
            "type": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "default": 0.10,
        },
        "context_dim": {"type": positive_integer, "default": 32},
        "ridge_lambda": {"type": {"type": "number", "minimum": 0}, "default": 1.0},
        "seed": seed,
    }


Schemas = {
    "data": DataSchema,
    "model": ModelSchema,
    "loss": LossSchema,
    "reg": RegSchema,
    "train": TrainSchema,
}


def resolve(schema, values, path=None, partial=False):
    """Validate a config section against its schema and fill defaults

    Arguments:
        schema: schema class with a `fields` map
        values: user-provided dict (may be None)
        path: prefix used in error messages, e.g. "loss"
        partial: if True, do not fill defaults or require keys
    Returns:
        new dict of validated values
    """
    path = path or schema.name
    values = values or {}
    if not isinstance(values, dict):
        raise ConfigValidationError(f'{path}: expecting object, got {values!r}')

    unknown = set(values) - set(schema.fields)
    if unknown:
        unknown = ', '.join(sorted(unknown))
        raise ConfigValidationError(f'{path}: unknown keys: {unknown}')

    result = {}
    for key, field in schema.fields.items():
        if key in values:
            value = values[key]
            try:
                validate(field['type'], value)
            except TypeValidationError as e:
                raise ConfigValidationError(f'{path}.{key}: {e}')
            result[key] = deepcopy(value)
        elif partial:
            continue
        elif field.get('required'):
            raise ConfigValidationError(f'{path}.{key}: required')
        else:
            result[key] = deepcopy(field.get('default'))
    return result


def describe(schema):
    """Render a schema as help text lines"""
    lines = [f'{schema.name}: {schema.description}']
    for key, field in schema.fields.items():
        kind = describe_type(field['type'])
        if field.get('required'):
            default = 'required'
        else:
            default = f"default {field.get('default')!r}"
        text = field.get('description', '')
        lines.append(f'  {schema.name}.{key} ({kind}, {default}) {text}'.rstrip())
    return '\n'.join(lines)
