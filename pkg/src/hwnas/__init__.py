"""Hardware-aware MLP architecture search and compression for FPGA targets."""

__version__ = "0.1.0"
