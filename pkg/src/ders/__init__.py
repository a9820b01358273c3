"""ders — a desk-scale Mixture-of-Experts toolkit.

Upcycles dense models into MoE models whose experts share a base weight and
differ by lightweight deltas (dense, sparse index/value, low-rank, quantized),
trains them with exact hand-derived gradients on synthetic tasks, and
compresses trained experts into compact bit-packed delta storage.
"""

__version__ = "0.1.0"
