"""Centripetal SGD training and lossless filter trimming."""

from ._csgd import (
    CsgdError,
    Network,
    build_network,
    chi,
    even_clusters,
    gradcheck,
    load_model,
    make_clusters,
    save_model,
    train,
    trim,
    two_point,
    verify,
)

__all__ = [
    "CsgdError",
    "Network",
    "build_network",
    "chi",
    "even_clusters",
    "gradcheck",
    "load_model",
    "make_clusters",
    "save_model",
    "train",
    "trim",
    "two_point",
    "verify",
]
