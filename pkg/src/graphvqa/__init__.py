"""Graph-structured visual question answering on abstract scenes.

Scenes and questions are both encoded as graphs. A GRU folds neighbourhood
context into every node, learned matching weights align words with objects,
and a pooled classifier scores the answers. Everything runs on numpy with a
small reverse-mode autodiff engine (:mod:`graphvqa.autodiff`).
"""

__version__ = "0.1.0"
