"""Open-set classification with contrastive features, spectral normalisation
and a Sinkhorn class-anchor loss, on a synthetic 2-D benchmark."""

__version__ = "0.1.0"
