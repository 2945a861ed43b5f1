"""Learned end-to-end MIMO and multi-user transceivers with classical baselines.

Modules
-------
numerics        counter-based random streams, small SVDs, Givens rotations
neural          NumPy multilayer perceptrons, backprop, Adam, power normalization
channels        Rayleigh block fading, AWGN, the two-user interference channel
constellations  square QAM, the D4 lattice, learned shapes, SER tables
baselines       Alamouti, SVD loading, ZF / vector-perturbation precoding, time sharing
autoencoders    scenario trainers and Givens de-rotation
evaluation      Monte Carlo BLER, sweeps, mutual information
cli             ``aelab`` command-line front end
"""

__version__ = "0.1.0"
