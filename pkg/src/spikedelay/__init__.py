"""Feedforward spiking networks with learnable per-synapse transmission delays.

Each synapse is a causal 1D temporal convolution whose single effective tap
position (the delay) is learned jointly with the weight through a Gaussian
interpolation kernel with a decaying standard deviation.  Training runs on a
small hand-written reverse-mode engine: every forward operation here has an
exact adjoint, validated against finite differences.
"""

__version__ = "0.1.0"
