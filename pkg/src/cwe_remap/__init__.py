"""
cwe_remap - knowledge-graph ranking of replacement CWEs for invalid CVE mappings.
"""

__version__ = "0.1.0"
