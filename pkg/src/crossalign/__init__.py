"""crossalign: contrastive alignment of images and neural firing-rate vectors.

Two encoder towers map images and response vectors into a shared latent
space; a symmetric contrastive loss aligns them. Direct regression baselines
(image-to-response and response-to-image) and a retrieval-style evaluation
with AUC scoring round out the toolkit, all on top of a small numpy-backed
autodiff engine. Synthetic datasets with a known stimulus-to-response
forward model make every piece verifiable end to end.
"""

from crossalign.tensor import Tensor, no_grad, set_default_dtype

__all__ = ["Tensor", "no_grad", "set_default_dtype"]
__version__ = "0.1.0"
