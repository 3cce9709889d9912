"""Cascade generative recommendation at desk scale.

Semantic-ID tokenization (residual K-means + greedy collision re-assignment),
an HSTU+MoE sequence encoder with dual SID decoder heads, joint
InfoNCE(LogQ)+SID training, and a beam-search -> embedding-rerank inference
cascade, plus evaluation and scaling-law harnesses.
"""

__version__ = "0.1.0"
