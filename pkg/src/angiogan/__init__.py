"""Fundus-to-angiogram translation with coarse/fine GANs on a small numpy autodiff engine."""

__version__ = "0.1.0"
