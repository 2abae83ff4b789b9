"""Curriculum-scheduled multi-teacher knowledge distillation for sequential recommendation."""

__version__ = "0.1.0"
