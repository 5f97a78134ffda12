"""Retrieval-enhanced machine learning: prediction models coupled to
information access models, with training regimes, evaluation and a
small shared retrieval service."""
from .access import InformationAccessModel
from .core import (
    Collection,
    Dataset,
    DimensionMismatch,
    Document,
    Feedback,
    NotDifferentiable,
    Query,
    QuotaExceeded,
    RemlError,
    ResultList,
    TrainingExample,
)
from .models import AugmentedLinearModel, KnnInterpolatedModel, MemoryWritingModel
from .querygen import QueryStrategy
from .response import ResponseProcessor
from .retrieval import DenseRetriever, LexicalRetriever, OracleRetriever, RandomRetriever
from .storage import StorageHandler, StoragePolicy

__version__ = "0.1.0"

__all__ = [
    "AugmentedLinearModel",
    "Collection",
    "Dataset",
    "DenseRetriever",
    "DimensionMismatch",
    "Document",
    "Feedback",
    "InformationAccessModel",
    "KnnInterpolatedModel",
    "LexicalRetriever",
    "MemoryWritingModel",
    "NotDifferentiable",
    "OracleRetriever",
    "Query",
    "QueryStrategy",
    "QuotaExceeded",
    "RandomRetriever",
    "RemlError",
    "ResponseProcessor",
    "ResultList",
    "StorageHandler",
    "StoragePolicy",
    "TrainingExample",
]
