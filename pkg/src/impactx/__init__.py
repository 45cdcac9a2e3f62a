"""IMPACTX: a dual-branch classifier trained to reconstruct Shapley attribution maps."""
from .errors import (CompatibilityError, ConfigError, DataError, DimensionError, FormatError,
                     ImpactxError, LabelError, NumericError, SizeError, StaleTapeError, StateError)
from .models import ImpactxModel, ImpactxSpec, BackboneSpec, predict_baseline, predict_impactx

__version__ = "0.1.0"
