"""Test package for GRM"""
