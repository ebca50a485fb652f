"""Static analysis of LLVM IR plus a small hierarchical encoder trained on it."""

__version__ = "0.1.0"
