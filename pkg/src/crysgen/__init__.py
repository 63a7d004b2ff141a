"""Three-stage crystal generation: lattice mixture sampling, permutation-
invariant autoregressive atom typing, and torus flow matching for positions."""

__version__ = "0.1.0"
