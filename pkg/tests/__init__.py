"""
Tests for recollide.
"""
