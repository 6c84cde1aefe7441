"""
Main module
"""
