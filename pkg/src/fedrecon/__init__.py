"""Desk-scale laboratory for gradient-difference data reconstruction attacks
on federated unlearning: train small federated classifiers, simulate
unlearning, capture the pre/post gradient pair, reconstruct the forgotten
images, and score the recovery."""

__version__ = "0.1.0"
