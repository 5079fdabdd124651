#!/usr/bin/env python3
"""Thin CLI shim for the amtnet pipeline."""
from __future__ import annotations

from amtnet.cli import main


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
