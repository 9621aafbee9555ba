"""Task-similarity weighted multi-source distillation workbench."""
