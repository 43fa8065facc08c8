"""GAN with a generator-inverting encoder for tissue patch representation analysis."""

__version__ = "0.1.0"
