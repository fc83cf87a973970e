"""Multi-view self-distillation at desk scale: synthetic paired-projection
data, a from-scratch ViT + distillation objective, and the matching
evaluation and analysis protocols."""

__version__ = "0.1.0"
