"""Chat prompt codec plus function-calling and long-context evaluation tools."""

__version__ = "0.1.0"
