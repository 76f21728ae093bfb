"""Query reformulation toolkit for behavior-impoverished e-commerce queries.

Mines query-query relevance from purchase logs, trains a retrieval
bi-encoder and a re-ranking cross-encoder with divergence-derived sample
weights and hard-negative objectives, and evaluates everything offline on
synthetic or real log data.
"""

__version__ = "0.1.0"
