"""Deterministic simulator of an IP-stride hardware prefetcher and the
cache side-channels it opens across code, process and kernel boundaries."""

from ._backend import NUMBA_ENABLED
from .experiments import (
    NoiseModel,
    UnsupportedChannelError,
    mitigation_eval,
    rev_conf_stride,
    rev_entries,
    rev_indexing,
    rev_page,
    rev_replacement,
    run_attack,
)
from .uarch import (
    LINE_BYTES,
    PAGE_BYTES,
    PrefetchRequest,
    PrefetchTable,
    PrefetcherEntry,
    Tlb,
    ip_tag,
    line_index,
    page_frame,
    reset_prefetcher,
)

__version__ = "0.1.0"

__all__ = [
    "LINE_BYTES",
    "PAGE_BYTES",
    "NUMBA_ENABLED",
    "NoiseModel",
    "PrefetchRequest",
    "PrefetchTable",
    "PrefetcherEntry",
    "Tlb",
    "UnsupportedChannelError",
    "ip_tag",
    "line_index",
    "mitigation_eval",
    "page_frame",
    "reset_prefetcher",
    "rev_conf_stride",
    "rev_entries",
    "rev_indexing",
    "rev_page",
    "rev_replacement",
    "run_attack",
    "__version__",
]
