"""Neural point cloud diffusion toolkit.

Hybrid point clouds (positions plus per-point features) rendered by a
shared point-based volume renderer, fitted per object with an
autodecoder, and modeled jointly by a denoising diffusion model that can
also resample one modality while pinning the other.
"""

__version__ = "0.1.0"
