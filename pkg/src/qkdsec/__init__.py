"""Numerical finite-key security bounds for practical QKD.

Builds the dual semidefinite programs whose feasible points certify
phase-error bounds, applies martingale concentration inequalities to
obtain finite-key secret-key lengths, and evaluates key rate versus
distance for BB84, MDI and decoy-state protocols with realistic
device imperfections (state-preparation flaws, side channels, pulse
correlations, detector tolerance mismatch).
"""

__version__ = "0.1.0"
