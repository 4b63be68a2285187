"""Interface modes and quasilinear transmission problems for Kerr wavepackets."""

__version__ = "0.1.0"
