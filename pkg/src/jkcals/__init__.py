"""Dense CP decomposition with concurrent ALS and accelerated jackknife."""
from .cals import CalsState, MultiFactor, cals_fit, fuse, fused_mttkrp
from .cp import (
    CpModel,
    FitConfig,
    compute_error,
    cp_als_fit,
    cp_als_sweep,
    init_random,
    reconstruct,
)
from .estimators import CPALS, ConcurrentCPALS, JackknifeCP
from .exceptions import NumericalBreakdownError
from .flops import FlopCounter
from .jackknife import (
    JackknifeConfig,
    SubmodelSet,
    UncertaintyResult,
    align_submodel,
    delete_d_groups,
    run_jackknife,
    jackknife_std,
    jk_als,
    jk_cals,
    jk_cals_multi,
    jk_parallel,
    pad_with_zero_rows,
    zero_rows_in_place,
)
from .tensor import (
    DenseTensor,
    frobenius_norm_sq,
    gramian,
    hadamard_gramians,
    khatri_rao,
    mttkrp,
    mttkrp_reference,
    pinv_solve,
    remove_slice,
    slice_norms_sq,
    unfold,
    unfold_index,
)

__version__ = "0.1.0"
