"""Multi-view conditioned novel-view synthesis at desk scale.

Posed input images are lifted to per-view tri-planes, fused and volume
rendered into a target-view latent, and injected into a small denoising
U-Net.
"""

__version__ = "0.1.0"
