"""Arbitrary-bit quantized GEMM via bit-plane popcount products, with PTQ calibration."""

__version__ = "0.1.0"
