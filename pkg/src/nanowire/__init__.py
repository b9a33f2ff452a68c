"""Self-consistent drift-diffusion and kinetic transport for confined nanowires."""

__version__ = "0.1.0"
