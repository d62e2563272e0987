"""Total variation functional and flow on compact metric graphs.

Layout:

* :mod:`tvgraph.graph` — metric graphs, validation, file format.
* :mod:`tvgraph.pwfunc` — piecewise-constant functions, traces, the total
  variation and its LP reference oracles, perimeter/coarea, dual-field
  diagnostics.
* :mod:`tvgraph.discrete` — meshes, the discrete functional, the proximal
  solver and the implicit-Euler flow with certificates.
* :mod:`tvgraph.oracle` — exact closed-form trajectories.
* :mod:`tvgraph.analysis` — extinction bounds, Rayleigh-quotient estimates,
  the minimal-sup-norm primitive.
* :mod:`tvgraph.trajio` — trajectory/diagnostics CSV files.
* :mod:`tvgraph.cli` — the ``tvgraph`` command.
"""

from .graph import Edge, GraphError, MetricGraph, boundary_interior, build_graph, degree, is_linear, load_graph, save_graph, total_length, trace_sign
from .pwfunc import (
    PiecewiseConstant,
    PiecewiseLinear,
    VertexTraceVector,
    coarea_sum,
    edge_variation,
    edge_variation_lp,
    green_residual,
    green_scale,
    kirchhoff_defect,
    load_function,
    median_level,
    perimeter,
    save_function,
    superlevel,
    total_variation,
    total_variation_lp,
    trace,
    vertex_jump_variation,
    vertex_traces,
    vertex_variation,
)
from .discrete import (
    CertificateReport,
    DiscreteState,
    DualState,
    FlowOptions,
    Mesh,
    ProxError,
    ProxOptions,
    Trajectory,
    build_mesh,
    certificate_check,
    detect_extinction,
    discrete_total_variation,
    mesh_from_bounds,
    project_zero_sum_box,
    prox_tv,
    run_decoupled_flow,
    run_flow,
    sample,
    sample_cell_means,
    state_l2,
    state_mass,
    to_piecewise_constant,
)
from .oracle import ExplicitSolution, OracleError, neumann1, neumann2, neumann3, neumann4, path3, star
from .analysis import (
    ExtinctionReport,
    LambdaEstimate,
    LambdaOptions,
    NotExtinguishedError,
    estimate_lambda,
    extinction_report,
    l2_norm,
    mean_value,
    primitive_sup_norm,
    rayleigh_quotient,
)

__version__ = "0.1.0"
