"""Desk-scale model of a secure multi-tenant HPC platform.

The package provides a deterministic batch scheduler, a virtual-cluster
provisioner, a network isolation model with a verifiable reachability
oracle, ACL-controlled storage with tamper-evident audit logging, trusted
third-party record linkage with disclosure-checked export, and a benchmark
harness that reports virtualization efficiency ratios.
"""

__version__ = "0.1.0"
