"""Speaker-embedding-free zero-shot voice conversion.

Discrete semantic tokens are rendered to a waveform by a conformer backbone
that takes the target timbre from a reference mel-spectrogram through
cross-attention without positional information on the reference side.
"""

__version__ = "0.1.0"
