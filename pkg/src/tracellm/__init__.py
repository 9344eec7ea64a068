"""Trace forensics for Ethereum incidents.

Turns raw transaction traces and contract bytecode into ranked anomalous
execution paths, k-hop context subgraphs and report-ready incident bundles.
"""

__version__ = "0.1.0"
