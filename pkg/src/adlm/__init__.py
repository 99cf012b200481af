"""Differentially private training with relevance-adaptive Laplace noise.

Modules: ``network`` (layers, forward/backward, checkpoints), ``data``
(IDX loading, scaling, batching), ``lrp`` (relevance propagation),
``mechanism`` (noise, budgets, perturbation), ``loss`` (cross-entropy and its
quadratic surrogate), ``trainer``, ``audit``, ``config`` and ``cli``.
"""
__version__ = "0.1.0"
