# -*- coding: utf-8 -*-
# src/rationalpg/__init__.py
"""
RationalPG Library
=========

Rational policy gradients for normal-form and iterated matrix games.

License: MIT
"""
from datetime import date

__version__ = "2026.10.16"
__author__ = "RationalPG Contributors"
__license__ = "MIT"
__copyright__ = f"Copyright© 2026-{date.today().year}"
