"""Desk-scale conversational recommendation engine.

Subsystems: dense autodiff (numcore), corpus data model and synthetic
generator (corpus), multi-modal semantic graphs (semgraph), a small decoder
LM with soft-prompt support (lm), recommendation and conversation prompt
learning (recsys, convgen), ranking/generation metrics (metrics), and the
CLI plus HTTP session service (cli, server).
"""

__version__ = "0.1.0"
