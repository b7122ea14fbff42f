"""Three-compartment prostate diffusion-MRI signal model with three
interchangeable per-voxel fitting engines (nonlinear least squares, a
supervised regressor, and a self-supervised fitter), plus synthetic data
generation and an estimation-quality metrics suite."""

__version__ = "0.1.0"
