"""
CLI Tools Package
"""
