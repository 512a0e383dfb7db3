"""Latent-space shape servoing of planar elastic rods.

Modules
-------
rodsim      discrete elastic-rod equilibria and the simulated plant
centerline  SOM centerline extraction from binary masks
latent      autoencoder and PCA shape features
jacobian    online Broyden-family Jacobian estimation
servo       closed-form receding-horizon controller
bench, cli  experiment harness and command line
"""
from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
