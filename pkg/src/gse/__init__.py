"""Activity-guided speaker embeddings: DSP front end, differentiable pooling
model, desk-scale training, and verification/diarization evaluation."""

__version__ = "0.1.0"
