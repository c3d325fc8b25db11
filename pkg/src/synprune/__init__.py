"""Kernel-level CNN pruning with explicit per-kernel strengths."""
