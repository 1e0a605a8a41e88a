"""Toolkit for measuring what makes chain-of-thought reasoning effective.

Ingests corpora of reasoning traces, segments and labels them, extracts
reasoning graphs, scores lexical and structural metrics (failed-step
fraction and companions), runs confound-controlled statistics, and drives
the two causal probes: metric-based test-time selection and failed-branch
editing.
"""

__version__ = "0.1.0"
