"""Few-shot meta-learning (Prototypical Networks, MAML) over embedding vectors,
with group distributionally robust training objectives."""

__version__ = "0.1.0"
