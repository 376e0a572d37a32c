"""
Command-line surface: run documents, command handlers and the entry point.
"""
