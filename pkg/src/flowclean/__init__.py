"""Batch cleaning of app-tagged encrypted mobile traffic.

Pipeline: ingest packets or flow tables, discard plaintext and known
background-service flows with lightweight DPI, cluster the remaining
encrypted flows per app, prune clusters by keep/drop rules, and score
the result by training a flow classifier against an oracle-cleaned
baseline.
"""

__version__ = "0.1.0"
