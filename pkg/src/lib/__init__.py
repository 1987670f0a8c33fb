"""
Plumbing shared by the pipeline: cached downloads from the NVD and related sources.
"""

__version__ = "0.1.0"
