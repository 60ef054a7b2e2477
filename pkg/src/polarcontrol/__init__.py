"""Bilinear control of ``i psi_t = (-d_xx + V) psi - u mu1 psi - u^2 mu2 psi`` on (0, 1).

Modules
-------
spectral    eigenbasis of ``-d_xx + V`` with Dirichlet conditions
dynamics    controls and the controlled propagator
lyapunov    steering to the ground state
moments     local exact controllability near the ground state
conditions  finite-truncation checks of the spectral hypotheses
pipeline    global transfer and the shifted frame
cli         command-line harness
"""

__version__ = "0.1.0"
