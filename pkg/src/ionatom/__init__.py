"""Single trapped ion colliding with ultracold atoms: simulators, EMM spectroscopy and thermometry."""

__version__ = "0.1.0"
