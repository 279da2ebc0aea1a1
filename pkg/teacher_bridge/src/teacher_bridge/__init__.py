"""teacher-bridge: run 2D feature encoders over posed images and emit
datasets the field engine can train from (the engine never imports this)."""

__version__ = "0.1.0"

from .encoders import EncoderUnavailable, StubEncoder, build_encoder
from .extract import encode_one, extract

__all__ = ["extract", "encode_one", "build_encoder", "StubEncoder",
           "EncoderUnavailable", "__version__"]
