"""PICO: a two-channel toy transformer that keeps the trusted prompt isolated.

System and user inputs are encoded by independent branches; the system
branch freezes after a warm-up and its bytes are hash-checked forever
after. A gate (max of a learned base gate, a security-expert score, and a
knowledge-graph risk score) weights the two streams both in pooled fusion
and inside the decoder's dual cross-attention. A verification harness
numerically certifies the invariance/detection/utility bounds this design
is built around.
"""

from .config import ModelConfig, substream
from .numkernel import ComputeTape, Tensor, backward, finite_diff_check

__version__ = "0.1.0"

__all__ = [
    "ComputeTape",
    "ModelConfig",
    "Tensor",
    "backward",
    "finite_diff_check",
    "substream",
    "__version__",
]
