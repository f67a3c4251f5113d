"""Phase-aware diffusion speech enhancement (SEDM).

A desk-scale monaural speech enhancement toolkit: STFT front end, a
forward diffusion process driven by real recorded noise clips, a
noise-aware reverse network that predicts both speech and noise spectra,
and complex-cycle-consistent magnitude/phase training. Ships with a CLI
for data preparation, training, enhancement, evaluation and ablations.
"""

from sedm.dsp import StftConfig, Waveform, MagPhase, stft, istft
from sedm.model import SEDMConfig, build_model, enhance

__version__ = "0.1.0"

__all__ = [
    "StftConfig",
    "Waveform",
    "MagPhase",
    "stft",
    "istft",
    "SEDMConfig",
    "build_model",
    "enhance",
    "__version__",
]
