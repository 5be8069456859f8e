"""Desk-scale federated-learning simulator for under-sampled MR image
reconstruction on synthetic multi-site data."""

from fedrecon.kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
