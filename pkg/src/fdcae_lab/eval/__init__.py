"""Decoding, scoring, the experiment matrix, report emission and the command-line entry point."""
