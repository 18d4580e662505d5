"""Desk-scale vision-language-action policy lab.

A from-scratch numpy stack: tensor kernel with a reverse-mode tape, a
synthetic 2D manipulation world with analytic expert actions, a
multi-segment transformer policy, a vision expert coupled in through
shared attention, saliency-guided token pruning, and probing tools.
"""

__version__ = "0.1.0"
