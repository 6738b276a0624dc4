"""
Tests for meanfield-lab.
"""
