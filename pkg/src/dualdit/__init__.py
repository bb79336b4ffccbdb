"""dualdit: a desk-scale dual-level pixel-space diffusion transformer.

Pure numpy implementation of the dual-pathway architecture (patch-level
semantic blocks plus a pixel-level refinement pathway with pixel-wise AdaLN
and token compaction), rectified-flow training, ODE samplers with
classifier-free guidance, and an analytic parameter/FLOPs cost model.
Everything is verified by finite-difference gradient checks and equivalence
oracles rather than large-scale training.
"""

from .tensor import Tape, Tensor, grad_check

__all__ = ["Tape", "Tensor", "grad_check"]
__version__ = "0.1.0"
