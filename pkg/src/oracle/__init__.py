"""
Oracle module
"""
