"""Embedding-space toolkit for domain-adaptive person re-identification.

Operates on precomputed feature embeddings: camera bias elimination,
k-reciprocal re-ranking, DBSCAN pseudo-label generation, distance-matrix
ensembling, training-loss numerics and mAP/CMC retrieval evaluation.

Submodules are imported explicitly (``from reidpipe import store``); this
package root stays import-light so the CLI can configure thread caps before
numpy is loaded.
"""

__version__ = "0.1.0"
