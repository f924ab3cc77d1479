"""Desk-scale lab for prompt-conditioned transformer policies on gridworlds.

Builds offline datasets from small deterministic MDPs, fits value critics
(exact dynamic programming, expectile regression, goal-conditioned variants),
trains causal-transformer policies conditioned on value or subgoal prompts,
and evaluates trajectory stitching with exact oracles.
"""

__version__ = "0.1.0"
