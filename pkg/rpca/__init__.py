"""Region-pooled channel-attention classification heads over pretrained CNN backbones."""

__version__ = "0.1.0"
