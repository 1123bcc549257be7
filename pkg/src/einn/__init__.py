"""Entropy-dissipation informed neural network solver for McKean-Vlasov equations."""

import jax

# Third derivatives of tanh lose most of their digits in single precision.
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
