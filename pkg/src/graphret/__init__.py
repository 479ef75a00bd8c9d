"""graphret: query-conditioned knowledge-graph retrieval.

Trains a query-conditioned graph network over multi-domain knowledge
graphs, fine-tunes a differentiable subgraph selector, and serves
retrieval queries as ranked documents, scored reasoning paths, and a
reproducible structured prompt.
"""

__version__ = "0.1.0"
