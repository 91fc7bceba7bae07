"""Joint models of censored multi-product demand with graph spillover.

Latent true demand follows a separable space-time Gaussian process in
state-space form; observations follow Gaussian, Tobit, or spillover-aware
Tobit likelihoods, fitted by conjugate-computation variational inference.
"""

from .diffusion import (
    DiffusionConfig,
    ProductGraph,
    build_graph,
    diffuse_step,
    diffused_demand,
    mask_graph,
)
from .inference import (
    FitConfig,
    FitDivergence,
    FittedModel,
    PosteriorMarginals,
    SiteParams,
    cvi_update,
    elbo,
    fit,
    kalman_filter,
    predict,
    rts_smoother,
)
from .kernels import (
    JointStateModel,
    ProductKernelSpec,
    StateSpaceKernel,
    TemporalKernelSpec,
    build_joint_model,
    build_statespace,
    discretize,
    eval_product_kernel,
)
from .likelihoods import (
    LikelihoodParams,
    QuadratureSpec,
    diffusion_tobit_logpdf,
    expected_loglik,
    tobit_logpdf,
)
from .simdata import (
    CensorPolicy,
    DemandPanel,
    apply_censoring,
    apply_demand_transfer,
    gen_sinusoid_panel,
    load_panel,
    sample_gp_panel,
    save_panel,
    split,
)

__version__ = "0.1.0"
