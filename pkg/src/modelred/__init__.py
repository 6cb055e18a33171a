"""Slow/fast stochastic model reduction toolkit.

Reduces systems with well-separated time scales two ways -- deterministic
center-manifold expansion and near-identity stochastic coordinate transforms
-- and validates the reductions by seeded Monte Carlo simulation.

Submodules
----------
stochpoly    exact term algebra (polynomials + noise symbols + memory kernels)
cmsolver     deterministic center-manifold expansion by coefficient matching
nfengine     iterative stochastic normal-form coordinate transforms
sdesim       Stratonovich SDE integration, escape statistics, histograms
systems      the two bundled case studies (Duffing oscillator, SEIR model)
experiments  end-to-end reproduction pipelines and report writers
cli          command-line entry point
"""

__version__ = "0.1.0"
