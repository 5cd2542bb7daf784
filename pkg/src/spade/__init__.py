"""Hybrid sequence model: a frozen state-space global layer fused with
efficient local attention, plus desk-scale training and benchmarking."""

from . import attention, bench, model, ssm, tasks, tensor, training  # noqa: F401

__version__ = "0.1.0"
