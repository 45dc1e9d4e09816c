"""Desk-scale training lab for dialog response generation.

A minimal numpy autodiff backend drives a transformer seq2seq policy that
can be trained either with cross-entropy or with a REINFORCE objective
whose per-sequence weight is the score of a frozen retrieval model minus a
margin. Includes candidate mix-policy sampling, a synthetic grammar task
with an exact oracle, an evaluation suite, and a CLI.
"""

__version__ = "0.1.0"
