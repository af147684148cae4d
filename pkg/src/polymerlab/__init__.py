"""Monte Carlo laboratory for a randomly charged lattice polymer.

A lazy simple random walk on Z^d carries i.i.d. centered unit-variance
charges; the energy couples every pair of monomers that share a site.  The
package estimates the lower tail of that energy (plain Monte Carlo,
explicit folding-strategy lower bounds, per-site envelope upper bounds),
measures the walk geometry behind it (confinement, occupation levels,
return probabilities and the transient Green constant), and samples the
annealed positive-temperature Gibbs measure to locate its collapse
transition.
"""

from .charge_field import (
    CENTERED_UNIFORM,
    GAUSSIAN,
    RADEMACHER,
    ChargeDistribution,
    charge_distribution,
    local_charges,
    moment_summary,
    normalized_charge_squares,
    rademacher_weight_table,
    sample_charges,
    sign_weight_logs,
)
from .energy import EnergyBreakdown, decompose, hamiltonian, site_variance_formula
from .estimates import TailEstimate, clopper_pearson_upper, from_hits
from .gibbs_sampler import (
    GibbsChain,
    GibbsConfig,
    IntegrationCurvatureError,
    enumerate_gibbs_law,
    log_partition,
    log_weight,
    mean_energy,
    phase_scan,
)
from .green_function import (
    GreenConstant,
    GridResolutionError,
    ReturnSeries,
    escape_probability,
    green_constant,
    green_table,
    mc_never_return_fraction,
    mc_return_partial_sum,
    return_probabilities,
)
from .lattice_walk import (
    LatticeBall,
    LocalTimeField,
    SplittingDied,
    Trajectory,
    lattice_ball,
    level_counts,
    local_times,
    move_table,
    q_norm,
    range_size,
    sample_confined_walk,
    sample_walk,
    survival_probability,
)
from .rng import spawn_rng
from .tail_estimators import (
    ExponentFit,
    StrategyConfig,
    default_strategy_config,
    double_visit_strategy,
    exact_energy_distribution,
    exponent_fit,
    level_set_tail_probe,
    naive_tail,
    nagaev_envelope,
    strategy_geometry,
    strategy_lower_bound,
    tilted_upper_bound,
)

__version__ = "0.1.0"
