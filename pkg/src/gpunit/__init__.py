"""Two-stage unsupervised image-to-image translation at desk scale.

Stage I distills cross-domain correspondence from a procedural paired-domain
factory into a single-channel content encoder; stage II trains an adversarial
translator on top of the frozen encoder with dynamic skip connections,
optional consistency control and optional semi-supervised position guidance.
"""

from .config import ModelConfig, RunConfig, SemiConfig, Stage1Config, Stage2Config

__version__ = "0.1.0"

__all__ = ["ModelConfig", "RunConfig", "SemiConfig", "Stage1Config", "Stage2Config",
           "__version__"]
