"""Ultra-high-dimensional sparse retrieval.

Trainable winner-take-all sparsification of dense token embeddings,
bucketed sparse representations, and an exact inverted-index ranking
engine, plus the training and evaluation tooling around them.
"""

from uhdsparse.errors import (
    CorruptFileError,
    DataError,
    EmptyTextError,
    FormatError,
    NoForwardStateError,
    TrainingDivergedError,
    UhdError,
)
from uhdsparse.sparse import (
    BucketDescriptor,
    BucketedRepresentation,
    SparseVector,
    dot,
    l2_normalize,
    max_pool,
    truncate_top_k,
)

__version__ = "0.1.0"

__all__ = [
    "BucketDescriptor",
    "BucketedRepresentation",
    "CorruptFileError",
    "DataError",
    "EmptyTextError",
    "FormatError",
    "NoForwardStateError",
    "SparseVector",
    "TrainingDivergedError",
    "UhdError",
    "dot",
    "l2_normalize",
    "max_pool",
    "truncate_top_k",
    "__version__",
]
