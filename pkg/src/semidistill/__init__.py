"""Semi-supervised knowledge distillation harness for CIFAR-10 style data."""

__version__ = "0.1.0"
