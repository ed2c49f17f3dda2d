from numbers import Integral, Real

from pyspml.exceptions import TypeValidationError


def is_nullable(T):
    """Return true if T is a null type or list with none type"""
    name = get_type_name(T)
    names = get_type_names(T)
    if name in {'null', 'any'} or names and 'null' in names:
        return True
    any_of = get_type_property(T, 'anyOf')
    if any_of and any([is_nullable(a) for a in any_of]):
        return True
    return False


def get_type_name(type):
    if isinstance(type, str):
        return type
    elif isinstance(type, dict):
        return get_type_name(type.get('type'))
    return None


def get_type_names(type):
    if isinstance(type, dict):
        return get_type_names(type.get('type'))
    if isinstance(type, list):
        return [get_type_name(t) for t in type]
    return None


def get_type_property(type, key):
    return type.get(key) if isinstance(type, dict) else None


def describe_type(T):
    """Short human-readable form of a type, used in --help output"""
    name = get_type_name(T)
    names = get_type_names(T)
    if names:
        return '|'.join(names)
    if name == 'array':
        items = get_type_property(T, 'items')
        return f'array<{describe_type(items)}>' if items else 'array'
    enum = get_type_property(T, 'enum')
    if enum:
        return '{' + ','.join(str(e) for e in enum) + '}'
    return name or 'any'


def _fail(throw, message):
    if throw:
        raise TypeValidationError(message)
    return False


def validate_object(type, value, throw=False):
    if not isinstance(value, dict):
        return _fail(throw, f'expecting object but got: {value}')
    properties = get_type_property(type, 'properties') or {}
    for key, T in properties.items():
        if key in value and not validate(T, value[key], throw=False):
            return _fail(throw, f'property "{key}" does not match {describe_type(T)}')
    return validate_multi(type, value, throw=throw)


def validate_array(type, value, throw=False):
    if not isinstance(value, (list, tuple)):
        return _fail(throw, f'expecting array but got: {value}')
    min_items = get_type_property(type, 'minItems')
    max_items = get_type_property(type, 'maxItems')
    if min_items is not None and len(value) < min_items:
        return _fail(throw, f'expecting at least {min_items} items but got {len(value)}')
    if max_items is not None and len(value) > max_items:
        return _fail(throw, f'expecting at most {max_items} items but got {len(value)}')
    items = get_type_property(type, 'items')
    if items:
        for i, item in enumerate(value):
            if not validate(items, item, throw=False):
                return _fail(
                    throw, f'item {i} ({item}) is not {describe_type(items)}'
                )
    return validate_multi(type, value, throw=throw)


def validate_boolean(type, value, throw=False):
    if not isinstance(value, bool):
        return _fail(throw, f'expecting boolean but got: {value}')
    return validate_multi(type, value, throw=throw)


def validate_null(type, value, throw=False):
    if value is not None:
        return _fail(throw, f'expecting null but got: {value}')
    return validate_multi(type, value, throw=throw)


def validate_range(type, value, throw=True):
    minimum = get_type_property(type, 'minimum')
    maximum = get_type_property(type, 'maximum')
    exclusive_minimum = get_type_property(type, 'exclusiveMinimum')
    exclusive_maximum = get_type_property(type, 'exclusiveMaximum')
    if minimum is not None and value < minimum:
        return _fail(throw, f'{value} is less than minimum {minimum}')
    if maximum is not None and value > maximum:
        return _fail(throw, f'{value} is greater than maximum {maximum}')
    if exclusive_minimum is not None and value <= exclusive_minimum:
        return _fail(throw, f'{value} must be greater than {exclusive_minimum}')
    if exclusive_maximum is not None and value >= exclusive_maximum:
        return _fail(throw, f'{value} must be less than {exclusive_maximum}')
    return True


def validate_number(type, value, throw=True):
    if isinstance(value, bool) or not isinstance(value, Real):
        return _fail(throw, f'expecting number but got: {value}')
    if not validate_range(type, value, throw=throw):
        return False
    return validate_multi(type, value, throw=throw)


def validate_integer(type, value, throw=True):
    if isinstance(value, bool) or not isinstance(value, Integral):
        return _fail(throw, f'expecting integer but got: {value}')
    if not validate_range(type, value, throw=throw):
        return False
    return validate_multi(type, value, throw=throw)


def validate_string(type, value, throw=True):
    if not isinstance(value, str):
        return _fail(throw, f'expecting string but got: {value}')
    return validate_multi(type, value, throw=throw)


def one(iterable):
    one = False
    for x in iterable:
        if bool(x):
            if one:
                # too many
                return False
            one = True
    return one


def validate_multi(type, value, throw=True):
    any_of = get_type_property(type, 'anyOf')
    one_of = get_type_property(type, 'oneOf')
    enum = get_type_property(type, 'enum')
    types = get_type_names(type)

    if types and not any([validate(t, value, throw=False) for t in types]):
        return _fail(throw, f'types({types}) not satisfied by: {value}')
    if any_of and not any([validate(t, value, throw=False) for t in any_of]):
        return _fail(throw, f'anyOf({any_of}) not satisfied by: {value}')
    if one_of and not one([validate(t, value, throw=False) for t in one_of]):
        return _fail(throw, f'oneOf({one_of}) not satisfied by: {value}')
    if enum and value not in enum:
        return _fail(throw, f'{value} is not one of {enum}')
    return True


def validate(type, value, throw=True):
    if value is None:
        # special case for None
        if not is_nullable(type):
            return _fail(throw, f'type {describe_type(type)} is not nullable')
        return True

    base_type = get_type_name(type)

    if base_type == 'array':
        return validate_array(type, value, throw=throw)
    elif base_type == 'object':
        return validate_object(type, value, throw=throw)
    elif base_type == 'string':
        return validate_string(type, value, throw=throw)
    elif base_type == 'null':
        return validate_null(type, value, throw=throw)
    elif base_type == 'number':
        return validate_number(type, value, throw=throw)
    elif base_type == 'integer':
        return validate_integer(type, value, throw=throw)
    elif base_type == 'boolean':
        return validate_boolean(type, value, throw=throw)
    elif base_type is None or base_type == 'any':
        # any or unspecified type
        return validate_multi(type, value, throw=throw)
    raise TypeValidationError(f'unknown type: {base_type}')
