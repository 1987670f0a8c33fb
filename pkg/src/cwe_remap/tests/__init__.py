"""
cwe_remap test package.
"""
