"""Transport modelling, particle simulation and parameter estimation for
closed-loop dispersive channels."""

from .analytic import (
    ChannelParams,
    DispersionInputs,
    dispersion_coefficient,
    normal_concentration,
    peak_times,
    wrapped_concentration,
)
from .errors import (
    CapacityError,
    ConfigError,
    DomainError,
    GridMismatchError,
    NormalizationError,
    RingflowError,
    TraceParseError,
)
from .pbs import PbsConfig, PbsResult, observe_bin, run_pbs
from .signal import (
    AccumulationParams,
    InjectionParams,
    IntensityTrace,
    MixtureParams,
    model_acc,
    model_dist,
)
from .fitting import FitResult, SearchSpace, fit_acc, fit_dist, fit_injection, rmse, select_best
from .dataset import read_trace, write_trace

__version__ = "0.1.0"
