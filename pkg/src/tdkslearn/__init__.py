"""Learning time-dependent Kohn-Sham correlation potentials with discrete adjoints."""

__version__ = "0.1.0"
