"""Volume forms, end charges and mass transfer on discretized model manifolds."""

from .domain import (Domain, Exhaustion, Region, build_domain, components, end_set_of,
                     region_algebra, representative_region, slab, standard_exhaustion)
from .ends import (EndCharge, charge_linear, end_charge_of, preservation_budget,
                   preservation_residual, validate_charge)
from .errors import (ArtifactError, DomainMismatch, EndSetMismatch, FormatError,
                     InfeasibleTargets, InfiniteSymmetricDifference, InvalidMap, MassMismatch,
                     NumericalError, OutOfRange, PreconditionError)
from .fields import (DensityField, DiffeoMap, IsotopyPath, TailModel, compose, finite_ends,
                     invert, j_transfer, mass, preimage, pushforward)
from .moser import (MoserProblem, cdf_transport_1d, collar_normalize, moser_flow_solve,
                    piecewise_moser, primitive)
from .transfer import (AllocationFunctional, balance_components, engulf_family, engulf_transfer,
                       lambda_of, make_functional, match_volume_forms, realize_end_charge,
                       stage_balance, transfer_time)

__all__ = [
    "Domain", "Exhaustion", "Region", "build_domain", "components", "end_set_of",
    "region_algebra", "representative_region", "slab", "standard_exhaustion",
    "EndCharge", "charge_linear", "end_charge_of", "preservation_budget",
    "preservation_residual", "validate_charge",
    "ArtifactError", "DomainMismatch", "EndSetMismatch", "FormatError", "InfeasibleTargets",
    "InfiniteSymmetricDifference", "InvalidMap", "MassMismatch", "NumericalError", "OutOfRange",
    "PreconditionError",
    "DensityField", "DiffeoMap", "IsotopyPath", "TailModel", "compose", "finite_ends", "invert",
    "j_transfer", "mass", "preimage", "pushforward",
    "MoserProblem", "cdf_transport_1d", "collar_normalize", "moser_flow_solve",
    "piecewise_moser", "primitive",
    "AllocationFunctional", "balance_components", "engulf_family", "engulf_transfer",
    "lambda_of", "make_functional", "match_volume_forms", "realize_end_charge",
    "stage_balance", "transfer_time",
]
