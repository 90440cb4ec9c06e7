"""Grant-free access simulation for cell-free massive MIMO: scenario
generation, low-resolution quantization, SS-GAMP activity detection and
channel estimation, SIC, and cloud/edge processing paradigms."""

__version__ = "0.1.0"
