"""Non-rigid RGB-D tracking and fusion driven by learned heatmap correspondences.

Modules:

- ``geometry``: camera model, frames, meshes, image sampling, PNG IO
- ``graph``: embedded deformation graph, skinning and warping
- ``energy``: residual terms with analytic sparse Jacobians
- ``solver``: Gauss-Newton with a matrix-free PCG inner solver
- ``tsdf``: canonical TSDF fusion and marching-cubes extraction
- ``provider``: heatmap correspondence providers (synthetic oracle, files)
- ``losses``: training losses of the correspondence predictor
- ``pipeline``: sequence reconstruction and dense pair alignment
- ``benchmark``: dataset index and evaluation metrics
- ``synth``: synthetic deforming sequences with exact ground truth
"""

__version__ = "0.1.0"
