"""Residual policy learning with Sinkhorn trajectory-matching rewards.

Pipeline: scripted demonstrations on planar manipulation tasks, offline
behavior-cloning pretraining of an observation encoder, a weak
non-parametric base policy (open-loop replay or kNN + locally weighted
regression), and an online residual actor-critic trained on optimal
transport rewards computed against the demonstrations.
"""

__version__ = "0.1.0"
