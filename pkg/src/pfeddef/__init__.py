"""Personalized federated learning under internal evasion attacks.

A deterministic, numpy-only simulator: Local / FedAvg / FedEM training,
PGD transfer attacks between clients, the pFedDef adversarial-training
defense with resource-aware robustness propagation, and decision-boundary
similarity analysis.
"""

__version__ = "0.1.0"
