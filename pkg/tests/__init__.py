"""
Unit tests for the spatialfusion package.
"""
