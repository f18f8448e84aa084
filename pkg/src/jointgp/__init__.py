"""Joint multivariate-GP longitudinal / Weibull-DPM survival modeling."""
import jax

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
