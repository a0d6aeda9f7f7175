"""Gaussian-copula joint models for longitudinal and right-censored event times.

The package couples a linear mixed model for a repeatedly measured biomarker
with a relative-risk hazard (piecewise-constant baseline, random intercept and
slope in the exponent) through a Gaussian copula on the conditional joint law
given the random effects, so the usual conditional-independence assumption
becomes the special case of a zero cross-correlation block.
"""

from .errors import DataError, DomainError, JointModelError, NumericError, UsageError
from .modelcore import (
    CorrelationSpec,
    DesignInfo,
    ModelParams,
    ParamLayout,
    SubjectRecord,
    build_R,
    natural_values,
    pack,
    unpack,
    validate_dataset,
)
from .statmath import (
    CholeskyFactor,
    GaussHermiteRule,
    conditional_normal,
    gauss_hermite_rule,
    mvn_logpdf,
    normal_cdf,
    normal_quantile,
)

__version__ = "0.1.0"
