"""Grid-based multi-marginal entropic optimal transport toolkit.

Solves the Schroedinger system on product grids, certifies the stability of
the marginals-to-potentials map along displacement paths, and simulates the
Wasserstein gradient flows driven by the entropic transport cost.
"""

from ._kernels import BACKEND
from .cost import CostTensor, build_cost, ck_norm_estimate, normalize_cost
from .errors import (
    CapacityError,
    CflError,
    ConfigError,
    ConvergenceError,
    DomainMismatchError,
    EntroflowError,
    GridTooCoarseError,
)
from .flow import (
    DecayFit,
    FlowResult,
    FlowSpec,
    FlowState,
    equilibrium_multispecies,
    fisher_information,
    fit_decay_rate,
    flow_step,
    run_flow,
    velocity_field,
)
from .measure import (
    DiscreteMeasure,
    Grid1D,
    MeasureFamily,
    PlanFamily,
    TransportPlan,
    displacement_interpolant,
    displacement_path,
    optimal_plan_1d,
    plan_cost,
    product_wasserstein,
    pushforward,
    wasserstein2_1d,
)
from .potential import (
    DensityFields,
    PotentialFamily,
    apply_T,
    apply_Tbar,
    canonical_gauge,
    density_fields,
    quotient_ck_norm,
    quotient_l2_norm,
    schrodinger_residual,
)
from .analysis import (
    LinearizedOperator,
    PathProbe,
    SobolevGram,
    assemble_linearization,
    dtG,
    dtG_path,
    energy_derivative,
    hneg_norm,
    lipschitz_ratio_ck,
    lipschitz_ratio_sobolev,
    potential_time_derivative,
    probe_path,
    semiconvexity_modulus,
    sobolev_gram,
    wasserstein_gradient_check,
)
from .solver import (
    Coupling,
    SolveReport,
    eot_value_dual,
    eot_value_primal,
    potential_lipschitz_check,
    primal_plan,
    solve,
)

__version__ = "0.1.0"
