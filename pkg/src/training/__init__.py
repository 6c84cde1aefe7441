"""
Training module
"""
