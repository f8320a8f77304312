"""vislex: desk-scale end-to-end vision-language pre-training.

A trainable convolutional encoder feeds an online visual dictionary whose
quantized tokens join a text sequence in a cross-modal transformer, trained
with masked-language, masked-visual and image-text-matching objectives on a
procedurally generated image-caption corpus.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, stop_gradient

__all__ = ["Tensor", "backward", "stop_gradient", "__version__"]
