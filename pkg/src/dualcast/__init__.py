"""dualcast: dual-level probabilistic forecasting of dynamical systems.

Level one forecasts the time-varying inputs of a physical system with
linear-Gaussian state-space models (augmented Matern-3/2 / exponential
kernels, optionally hybridized with an LSTM state transition). Level
two propagates the sampled input trajectories through an implicit
Runge-Kutta physics-informed network (or a plain data-driven net) to
produce multi-step output forecasts with uncertainty bands.
"""

__version__ = "0.1.0"
