# SPDX-License-Identifier: Apache-2.0
"""Benchmark suite for probabilistic generative models.

Three model families (neural spline flow, conditional flow matching,
denoising diffusion) on a shared MLP backbone, with Gaussian-mixture and
dihedral-angle dataset generators and a PCA + binned-KLD evaluation
pipeline. The heavy lifting lives in the C++ extension `_probgen`.
"""

from ._probgen import (
    Ddpm,
    FlowMatching,
    LoadedModel,
    NsFlow,
    destandardize,
    estimate_delta_f,
    evaluate_samples,
    gen_dihedral_surrogate,
    gen_gmm,
    ingest_dihedrals,
    load_model,
    pca_fit,
    r_squared,
    random_mode_means,
    read_csv,
    split_rows,
    standardize,
    write_csv,
    __version__,
)

__all__ = [
    "Ddpm",
    "FlowMatching",
    "LoadedModel",
    "NsFlow",
    "destandardize",
    "estimate_delta_f",
    "evaluate_samples",
    "gen_dihedral_surrogate",
    "gen_gmm",
    "ingest_dihedrals",
    "load_model",
    "pca_fit",
    "r_squared",
    "random_mode_means",
    "read_csv",
    "split_rows",
    "standardize",
    "write_csv",
    "__version__",
]
