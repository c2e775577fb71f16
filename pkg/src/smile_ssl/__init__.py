"""Multiview vision-language self-supervised learning for facial expression
recognition, on a small numpy autodiff engine."""

__version__ = "0.1.0"
