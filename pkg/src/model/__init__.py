"""
Model module
"""
