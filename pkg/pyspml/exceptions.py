class SPMLError(Exception):
    """Base class for pyspml errors"""
    pass


class TypeValidationError(SPMLError):
    """Exception validating a data type"""
    pass


class ConfigValidationError(SPMLError):
    """Exception validating an experiment or generator config"""
    pass


class ManifestValidationError(SPMLError):
    """Exception validating a dataset manifest against its schema"""
    pass


class ManifestReferenceError(ManifestValidationError):
    """Exception resolving a clip/asset cross-reference"""
    pass


class LabelError(SPMLError):
    """Exception caused by malformed labels or inconsistent metadata"""
    pass


class SplitError(SPMLError):
    """Exception splitting a dataset"""
    pass


class RegimeError(SPMLError):
    """Exception constructing a data regime"""
    pass


class CalibrationError(RegimeError):
    """Exception calibrating a prior threshold"""
    pass


class LossConfigurationError(SPMLError):
    """Exception caused by an invalid loss specification or loss input"""
    pass


class ShapeError(SPMLError):
    """Exception caused by mismatched array dimensions"""
    pass


class TrainingError(SPMLError):
    """Exception raised when training cannot continue"""
    pass


class EvaluationError(SPMLError):
    """Exception evaluating a model"""
    pass
