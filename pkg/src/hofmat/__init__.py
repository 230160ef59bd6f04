"""Generalized Hofstadter-type block matrices for magnetic lattice operators.

The package assembles pseudodifferential operators with magnetic phase
factors into block matrices indexed by lattice cells, and provides the
spectral toolbox used to study how those matrices respond to changes in the
field strength: block decay and Lipschitz block dependence, square-root
continuity of spectra, and Lipschitz motion of spectral edges and gap edges.
"""

from .geometry import (
    DEFAULT_QUAD,
    MagneticField,
    QuadratureSpec,
    cell_pair_flux,
    flux,
    triangle_area,
    triangle_flux,
    validate_field,
    vector_potential,
)
from .symbols import (
    General,
    Hopping,
    Symbol,
    SymbolReport,
    XiIntegrable,
    gaussian_xi,
    harper,
    modulated,
    validate_symbol,
)
from .spectral import (
    EdgeTrack,
    GapList,
    HolderFit,
    RieszResult,
    SpectrumResult,
    drop_boundary_states,
    eigenvalues_hermitian,
    eigh_checked,
    find_gaps,
    hausdorff,
    hermitian_defect,
    holder_fit,
    operator_norm,
    random_hermitian,
    riesz_project,
    track_gap_edge,
)
from .assembly import (
    DecayProfile,
    EpsilonReport,
    GeneralizedMatrix,
    SampledFunction,
    TruncationParams,
    apply_Ub,
    apply_Ub_inverse,
    assemble,
    assemble_block,
    block_difference_sup,
    boundary_site_mask,
    cellwise_mode_function,
    decay_profile,
    epsilon_convergence_check,
    flatten,
    fourier_modes,
    kernel_K,
    lattice_sites,
    load_matrix,
    peierls_matrix,
    quadratic_form_oracle,
    rephase,
    richardson_epsilon,
    save_matrix,
    truncate_band,
    unflatten,
)

__version__ = "0.1.0"
