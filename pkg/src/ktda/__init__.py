"""Knowledge-transfer + domain-adaptation segmentation kit.

A CNN student backbone distills features from a frozen vision-transformer
teacher through a feature alignment module (1x1 conv + bilinear resize),
adapts them with a transformer-block modulation stack, and trains dual
decoder heads against synthetic fine-grained masks. Everything runs on the
in-package reverse-mode autodiff engine.
"""

__version__ = "0.1.0"

from . import tensor

__all__ = ["tensor", "__version__"]
