"""Garment transfer from a dressed model photo to a target person photo.

The pipeline warps the model image into the person's pose through shared
dense-pose UV coordinates, then runs three generative stages (pose
alignment, texture refinement, fitting) trained jointly on unpaired
cross-identity samples and self-supervised same-identity pairs.
"""

from .imagecore import BinaryMask, ImageTensor, IuvMap

__all__ = ["BinaryMask", "ImageTensor", "IuvMap"]
__version__ = "0.1.0"
