"""Bi-level MPC for a ballbot that braces against walls with its arms.

The package is organised as a stack: ``model`` (rigid-body model and arm
kinematics), ``environment`` (signed-distance walls), ``contact`` (soft
contact curve and schedule extraction), ``solver`` (iLQR over a generic
optimal control problem), ``mpc`` (the two planning levels and their
scheduler), ``tracking`` (body PID cascade and arm impedance), ``sim``
(ground-truth physics and the closed loop), plus scenario/config parsing,
run logging and a CLI.

Everything numerical runs in float64; the JAX backend is pinned to CPU so
runs are reproducible bit-for-bit across processes on the same machine.
"""

import jax

# Must happen before any jax.numpy array is created anywhere in the package.
jax.config.update("jax_enable_x64", True)
jax.config.update("jax_platform_name", "cpu")

__version__ = "0.1.0"
