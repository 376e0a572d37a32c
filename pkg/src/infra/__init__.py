"""
Process-level infrastructure: settings, logging sinks, random streams.
"""
