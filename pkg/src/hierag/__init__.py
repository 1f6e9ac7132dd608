"""Bottom-up implicit-knowledge distillation of file trees for retrieval-augmented QA."""

__version__ = "0.1.0"
