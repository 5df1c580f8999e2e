"""duodiff: two-role conditional diffusion for paired speaker/listener motion."""

__version__ = "0.1.0"
