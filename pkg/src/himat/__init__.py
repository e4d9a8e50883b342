"""himat: multi-map diffusion transformers with wavelet supervision, desk scale."""

__version__ = "0.1.0"

from himat.tensor import Tensor  # noqa: F401
