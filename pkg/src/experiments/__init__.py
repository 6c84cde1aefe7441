"""
Experiments module
"""
