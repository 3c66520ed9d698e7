"""detlab: determinantal ensembles, equilibrium measures and large deviations on the projective line."""

__version__ = "0.1.0"
