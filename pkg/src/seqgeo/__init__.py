"""seqgeo: localize ground-image sequences against an aerial gallery.

Pipeline pieces: GPS-track segmentation into tile-bounded runs,
temporal aggregation of per-frame embeddings into one descriptor,
soft-margin triplet training, and exact recall@K retrieval evaluation.
"""

__version__ = "0.1.0"

from seqgeo.kernels import BACKEND as kernel_backend  # noqa: F401
