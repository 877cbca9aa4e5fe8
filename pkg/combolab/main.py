#!/usr/bin/env python3
"""
ComboLab - Main entry point

This script serves as a convenience wrapper to run the combolab command line.
"""

import sys

from combolab.cli import main

if __name__ == "__main__":
    sys.exit(main())
