"""
Sim module
"""
