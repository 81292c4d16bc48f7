"""Shared low-rank subspaces of LoRA adapter ensembles.

Robust extraction by iteratively reweighted least squares, spectral and
overlap analysis of the extracted subspaces, and a reduced basis for
training only the core matrix ``M`` of ``dW = A_bar @ M @ B_bar.T``.
"""

from lora_subspace.basis import (
    SubspaceBasis,
    SubspaceDelta,
    apply_delta,
    assemble_basis,
    fit_m,
    grad_m,
)
from lora_subspace.errors import (
    CorruptBlob,
    DimensionError,
    DivergenceError,
    InvalidInput,
    IoError,
    LoraSubspaceError,
    SingularError,
    UnsupportedFormat,
)
from lora_subspace.extraction import (
    irls_extract,
    objective,
    truncated_factorization,
    update_weights,
    weighted_mixture,
)
from lora_subspace.linalg import (
    FactoredMatrix,
    SvdResult,
    frob_dist_factored,
    gen_eig_smallest,
    svd,
    thin_qr,
)
from lora_subspace.model import (
    ExtractionConfig,
    LayerKey,
    LoraAdapter,
    LoraEnsemble,
    SharedSubspace,
    adapter_delta_dense,
    validate_ensemble,
)
from lora_subspace.orthogonality import (
    OverlapReport,
    canonicalize,
    pairwise_overlap,
    subspace_overlap,
)
from lora_subspace.spectral import (
    SpectrumReport,
    allocate_ranks,
    classify_pattern,
    detect_gap,
    effective_rank,
    magnitude_curve,
    spectrum,
)
from lora_subspace.synth import PlantedSpec, attribute_bases, generate_planted, planted_adapters, recovery_error

__version__ = "0.1.0"
