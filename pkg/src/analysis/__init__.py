"""
Analysis module
"""
