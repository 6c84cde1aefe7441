"""
VSteer
"""
