"""Temporally coherent line-art colorization with a conditional GAN."""

__version__ = "0.1.0"
