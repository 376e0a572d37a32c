"""
LangGraph orchestration of CLI runs.
"""
