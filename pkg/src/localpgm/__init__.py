"""Consistent marginal estimation from noisy measurements over region graphs."""
from .errors import (
    EmptyDatasetError,
    IncompleteVectorError,
    InvalidCliqueError,
    InvalidCountingNumbersError,
    InvalidDistributionError,
    StepSizeTooLargeError,
    TableTooLargeError,
    UnsupportedCliqueError,
)
from .factors import (
    Clique,
    CliqueVector,
    Dataset,
    Domain,
    Factor,
    dataset_datavector,
    dataset_project,
    factor_entropy,
    factor_expand,
    factor_logsumexp,
    factor_marginalize,
)
from .region_graph import (
    ConsistencyReport,
    RegionGraph,
    build_factor_graph,
    build_saturated,
    check_local_consistency,
    supports,
)
from .inference import GbpConfig, MessageState, convex_gbp, exact_oracle, free_energy

__version__ = "0.1.0"
